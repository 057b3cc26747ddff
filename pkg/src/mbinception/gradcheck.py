"""Central finite-difference verification of backward passes.

Relative error between analytic ``a`` and numeric ``n`` is
``|a - n| / max(|a|, |n|, floor)`` with ``floor = 1e-6 * max(1, |loss|)``,
so entries whose true gradient is tiny are judged on an absolute scale
proportional to the floating-point noise of the difference quotient.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .graph import LAYERS, backward, forward
from .nn import softmax_cross_entropy

H = 1e-5
MODEL_TOL = 1e-3
LAYER_TOL = 1e-4


def relative_error(analytic, numeric, loss_scale=1.0):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    floor = 1e-6 * max(1.0, abs(loss_scale))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


def numeric_gradient(f, x, h=H):
    """Central differences of scalar ``f()`` w.r.t. array ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def _layer_inputs(kind, in_shapes, rng):
    xs = []
    for shape in in_shapes:
        if kind == "maxpool":
            # distinct values spaced far beyond h: no argmax switches under perturbation
            size = int(np.prod(shape))
            x = rng.permutation(size).astype(np.float64).reshape(shape) * 0.01
        else:
            x = rng.standard_normal(shape)
            if kind == "relu":
                x = np.where(x >= 0, x + 0.1, x - 0.1)
        xs.append(x)
    return xs


def check_layer(kind, config, in_shapes, seed=0, mode="train", h=H):
    """Compare one layer's backward with finite differences on random data.

    ``in_shapes`` include the batch axis. Returns the worst relative error
    over every input and every parameter.
    """
    layer = LAYERS[kind]
    rng = np.random.default_rng(seed)
    xs = _layer_inputs(kind, in_shapes, rng)
    feature_shapes = [tuple(s[1:]) for s in in_shapes]
    params = {name: rng.standard_normal(shape) for name, shape in layer.param_shapes(feature_shapes, config).items()}
    buffers = {}
    for name, shape in layer.buffer_shapes(feature_shapes, config).items():
        buffers[name] = rng.random(shape) + 0.5 if name == "running_var" else rng.standard_normal(shape)

    def run():
        out, ctx = layer.forward(xs, params, buffers, config, mode, np.random.default_rng(seed + 1))
        return out, ctx

    out, ctx = run()
    weights = rng.standard_normal(out.shape) / np.sqrt(out.size)

    def loss():
        return float(np.sum(run()[0] * weights))

    base = loss()
    if isinstance(ctx, dict):
        ctx.pop("new_buffers", None)
    in_grads, p_grads = layer.backward(ctx, weights.copy())
    worst = 0.0
    for x, g in zip(xs, in_grads):
        worst = max(worst, relative_error(g, numeric_gradient(loss, x, h), base))
    for name, p in params.items():
        worst = max(worst, relative_error(p_grads[name], numeric_gradient(loss, p, h), base))
    return worst


@dataclass
class GradcheckReport:
    model: str
    param_count: int
    worst_by_kind: dict = field(default_factory=dict)
    node_errors: dict = field(default_factory=dict)
    model_error: float = 0.0
    failures: list = field(default_factory=list)
    model_tol: float = MODEL_TOL
    layer_tol: float = LAYER_TOL

    @property
    def passed(self):
        return not self.failures and self.model_error <= self.model_tol

    @property
    def worst(self):
        return max([self.model_error, *self.worst_by_kind.values()], default=0.0)

    def lines(self):
        out = [f"gradcheck {self.model} ({self.param_count} parameters)"]
        for kind in sorted(self.worst_by_kind):
            out.append(f"  {kind:<14} worst rel err {self.worst_by_kind[kind]:.3e}")
        out.append(f"  whole-graph    worst rel err {self.model_error:.3e} (tol {self.model_tol:g})")
        for node_id in self.failures:
            out.append(f"  FAIL node {node_id}: rel err {self.node_errors[node_id]:.3e}")
        out.append("PASS" if self.passed else "FAIL")
        return out


def jitter_parameters(model, seed=0, scale=0.1):
    """Copy of ``model`` with biases, betas and gammas moved off their init values.

    Zero biases plus dead units put ReLUs exactly on their kink, where a
    central difference straddles two slopes.
    """
    model = copy.deepcopy(model)
    rng = np.random.default_rng(seed)
    for key, value in model.store.params.items():
        name = key.rsplit("/", 1)[1]
        if name in ("bias", "beta"):
            model.store.params[key] = value + scale * rng.standard_normal(value.shape)
        elif name == "gamma":
            model.store.params[key] = value * (1.0 + scale * rng.standard_normal(value.shape))
    return model


def check_model(model, batch_size=2, seed=0, model_tol=MODEL_TOL, layer_tol=LAYER_TOL, h=H, jitter=True):
    """Whole-graph check on every parameter plus a local check on every node.

    Runs in train mode (batch statistics, fixed dropout masks) on a jittered
    copy of the model (see :func:`jitter_parameters`); the caller's model is
    left untouched.
    """
    model = jitter_parameters(model, seed) if jitter else copy.deepcopy(model)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch_size,) + tuple(model.input_shape[1:]))
    labels = rng.integers(0, model.num_classes, size=batch_size)
    params = model.store.params

    def loss():
        tape = forward(model, x, "train", np.random.default_rng(seed + 7), update_stats=False, keep=False)
        return softmax_cross_entropy(tape.logits, labels)[0]

    tape = forward(model, x, "train", np.random.default_rng(seed + 7), update_stats=False)
    base, grads = backward(model, tape, labels)
    report = GradcheckReport(model.name, int(sum(p.size for p in params.values())),
                             model_tol=model_tol, layer_tol=layer_tol)
    owner = {}
    for node in model.nodes:
        for key in params:
            if key.rsplit("/", 1)[0] == node.id:
                owner[key] = node
    for key, value in params.items():
        if value.dtype != np.float64:
            raise TypeError("gradient checks need float64 parameters")
        err = relative_error(grads[key], numeric_gradient(loss, value, h), base)
        node = owner[key]
        report.model_error = max(report.model_error, err)
        report.node_errors[node.id] = max(report.node_errors.get(node.id, 0.0), err)
        if err > model_tol and node.id not in report.failures:
            report.failures.append(node.id)
        report.worst_by_kind[node.kind] = max(report.worst_by_kind.get(node.kind, 0.0), err)

    for i, node in enumerate(model.nodes):
        if node.kind in ("input", "softmax-xent"):
            continue
        in_shapes = [(batch_size,) + model.shapes[s] for s in node.inputs]
        err = check_layer(node.kind, node.config, in_shapes, seed=seed + 100 + i, h=h)
        report.node_errors[node.id] = max(report.node_errors.get(node.id, 0.0), err)
        report.worst_by_kind[node.kind] = max(report.worst_by_kind.get(node.kind, 0.0), err)
        if err > layer_tol and node.id not in report.failures:
            report.failures.append(node.id)
    return report


TOY_CONFIGS = {
    "mbinception": {"input_shape": (1, 8, 8, 3), "n": 4, "stage_multipliers": (1,), "num_classes": 10},
    "vgg-style": {"input_shape": (1, 8, 8, 3), "width": 2, "depth": 2, "num_classes": 10},
    "resnet-style": {"input_shape": (1, 8, 8, 3), "width": 2, "depth": 2, "num_classes": 10},
    "mobilenet-style": {"input_shape": (1, 8, 8, 3), "width": 2, "depth": 2, "num_classes": 10},
    "dense-only": {"input_shape": (1, 4, 4, 1), "hidden": 8, "num_classes": 3},
}
