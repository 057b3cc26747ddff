"""Layer graphs: node registry, shape inference, execution and (de)serialization."""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DomainError, GraphError, ShapeError

GRAPH_FORMAT = "mbinception-graph"
GRAPH_VERSION = 1


@dataclass
class LayerNode:
    id: str
    kind: str
    config: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)

    def describe(self):
        return {"id": self.id, "kind": self.kind, "config": dict(self.config), "inputs": list(self.inputs)}


@dataclass
class ParameterStore:
    """Trainable arrays plus non-trainable buffers (batch-norm running stats)."""

    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def copy(self):
        return ParameterStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


# -- layer registry -------------------------------------------------------------
# Shapes handled here exclude the batch dimension except where noted.


class Layer:
    arity = 1

    def param_shapes(self, in_shapes, cfg):
        return {}

    def buffer_shapes(self, in_shapes, cfg):
        return {}

    def fan_in(self, name, shape):
        return None

    def out_shape(self, in_shapes, cfg):
        return in_shapes[0]

    def forward(self, xs, p, b, cfg, mode, rng):
        raise NotImplementedError

    def backward(self, ctx, grad):
        raise NotImplementedError


class InputLayer(Layer):
    arity = 0

    def out_shape(self, in_shapes, cfg):
        return tuple(cfg["shape"])


class ConvLayer(Layer):
    def param_shapes(self, in_shapes, cfg):
        k = cfg["kernel"]
        return {"kernel": (k, k, in_shapes[0][-1], cfg["filters"]), "bias": (cfg["filters"],)}

    def fan_in(self, name, shape):
        return shape[0] * shape[1] * shape[2] if name == "kernel" else None

    def out_shape(self, in_shapes, cfg):
        h, w, _ = in_shapes[0]
        k = cfg["kernel"]
        ho, wo = nn.conv_output_shape((1, h, w, 0), k, k, cfg.get("stride", 1), cfg.get("padding", "same"))
        return (ho, wo, cfg["filters"])

    def forward(self, xs, p, b, cfg, mode, rng):
        return nn.conv2d_forward(xs[0], p["kernel"], p["bias"], cfg.get("stride", 1), cfg.get("padding", "same"))

    def backward(self, ctx, grad):
        gx, gk, gb = nn.conv2d_backward(ctx, grad)
        return [gx], {"kernel": gk, "bias": gb}


class PointwiseLayer(ConvLayer):
    def param_shapes(self, in_shapes, cfg):
        return {"kernel": (1, 1, in_shapes[0][-1], cfg["filters"]), "bias": (cfg["filters"],)}

    def out_shape(self, in_shapes, cfg):
        h, w, _ = in_shapes[0]
        return (h, w, cfg["filters"])

    def forward(self, xs, p, b, cfg, mode, rng):
        return nn.pointwise_conv2d_forward(xs[0], p["kernel"], p["bias"])


class DepthwiseLayer(Layer):
    def param_shapes(self, in_shapes, cfg):
        k, c = cfg["kernel"], in_shapes[0][-1]
        return {"kernel": (k, k, c, 1), "bias": (c,)}

    def fan_in(self, name, shape):
        return shape[0] * shape[1] if name == "kernel" else None

    def out_shape(self, in_shapes, cfg):
        h, w, c = in_shapes[0]
        k = cfg["kernel"]
        ho, wo = nn.conv_output_shape((1, h, w, c), k, k, cfg.get("stride", 1), cfg.get("padding", "same"))
        return (ho, wo, c)

    def forward(self, xs, p, b, cfg, mode, rng):
        return nn.depthwise_conv2d_forward(
            xs[0], p["kernel"], p["bias"], cfg.get("stride", 1), cfg.get("padding", "same")
        )

    def backward(self, ctx, grad):
        gx, gk, gb = nn.depthwise_conv2d_backward(ctx, grad)
        return [gx], {"kernel": gk, "bias": gb}


class BatchNormLayer(Layer):
    def param_shapes(self, in_shapes, cfg):
        c = in_shapes[0][-1]
        return {"gamma": (c,), "beta": (c,)}

    def buffer_shapes(self, in_shapes, cfg):
        c = in_shapes[0][-1]
        return {"running_mean": (c,), "running_var": (c,)}

    def forward(self, xs, p, b, cfg, mode, rng):
        out, ctx, (rm, rv) = nn.batchnorm_forward(
            xs[0],
            p["gamma"],
            p["beta"],
            b["running_mean"],
            b["running_var"],
            mode,
            cfg.get("momentum", nn.BN_MOMENTUM),
            cfg.get("eps", nn.BN_EPS),
        )
        ctx["new_buffers"] = {"running_mean": rm, "running_var": rv}
        return out, ctx

    def backward(self, ctx, grad):
        gx, gg, gb = nn.batchnorm_backward(ctx, grad)
        return [gx], {"gamma": gg, "beta": gb}


class ReluLayer(Layer):
    def forward(self, xs, p, b, cfg, mode, rng):
        return nn.relu_forward(xs[0])

    def backward(self, ctx, grad):
        return [nn.relu_backward(ctx, grad)], {}


class MaxPoolLayer(Layer):
    def out_shape(self, in_shapes, cfg):
        h, w, c = in_shapes[0]
        pool, padding = cfg["pool"], cfg.get("padding", "valid")
        if padding == "valid" and (pool > h or pool > w):
            raise ShapeError(f"pool window {pool}x{pool} larger than input {h}x{w}")
        ho, wo = nn.conv_output_shape((1, h, w, c), pool, pool, cfg["stride"], padding)
        return (ho, wo, c)

    def forward(self, xs, p, b, cfg, mode, rng):
        return nn.maxpool2d_forward(xs[0], cfg["pool"], cfg["stride"], cfg.get("padding", "valid"))

    def backward(self, ctx, grad):
        return [nn.maxpool2d_backward(ctx, grad)], {}


class DropoutLayer(Layer):
    def forward(self, xs, p, b, cfg, mode, rng):
        return nn.dropout_forward(xs[0], cfg["rate"], rng, mode)

    def backward(self, ctx, grad):
        return [nn.dropout_backward(ctx, grad)], {}


class FlattenLayer(Layer):
    def out_shape(self, in_shapes, cfg):
        return (int(np.prod(in_shapes[0])),)

    def forward(self, xs, p, b, cfg, mode, rng):
        x = xs[0]
        return x.reshape(x.shape[0], -1), {"shape": x.shape}

    def backward(self, ctx, grad):
        return [grad.reshape(ctx["shape"])], {}


class DenseLayer(Layer):
    def param_shapes(self, in_shapes, cfg):
        if len(in_shapes[0]) != 1:
            raise ShapeError(f"dense needs flat input, got {in_shapes[0]}")
        return {"weight": (in_shapes[0][0], cfg["units"]), "bias": (cfg["units"],)}

    def fan_in(self, name, shape):
        return shape[0] if name == "weight" else None

    def out_shape(self, in_shapes, cfg):
        return (cfg["units"],)

    def forward(self, xs, p, b, cfg, mode, rng):
        return nn.dense_forward(xs[0], p["weight"], p["bias"])

    def backward(self, ctx, grad):
        gx, gw, gb = nn.dense_backward(ctx, grad)
        return [gx], {"weight": gw, "bias": gb}


class ConcatLayer(Layer):
    arity = None

    def out_shape(self, in_shapes, cfg):
        first = in_shapes[0]
        for s in in_shapes[1:]:
            if len(s) != len(first) or s[:-1] != first[:-1]:
                raise ShapeError(f"concat inputs disagree off the channel axis: {in_shapes}")
        return first[:-1] + (sum(s[-1] for s in in_shapes),)

    def forward(self, xs, p, b, cfg, mode, rng):
        from .tensor import concat

        return concat(xs, axis=-1), {"splits": [x.shape[-1] for x in xs]}

    def backward(self, ctx, grad):
        bounds = np.cumsum(ctx["splits"])[:-1]
        return [np.ascontiguousarray(g) for g in np.split(grad, bounds, axis=-1)], {}


class AddLayer(Layer):
    arity = 2

    def out_shape(self, in_shapes, cfg):
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"add requires identical shapes, got {in_shapes[0]} and {in_shapes[1]}")
        return in_shapes[0]

    def forward(self, xs, p, b, cfg, mode, rng):
        if xs[0].shape != xs[1].shape:
            raise ShapeError(f"add requires identical shapes, got {xs[0].shape} and {xs[1].shape}")
        return xs[0] + xs[1], {}

    def backward(self, ctx, grad):
        return [grad, grad], {}


class SoftmaxXentLayer(Layer):
    """Terminal node. Forward is the identity on logits; the loss is taken in backward."""

    def out_shape(self, in_shapes, cfg):
        if len(in_shapes[0]) != 1:
            raise ShapeError(f"softmax-xent needs [N, K] logits, got {in_shapes[0]}")
        return in_shapes[0]

    def forward(self, xs, p, b, cfg, mode, rng):
        return xs[0], {}


LAYERS = {
    "input": InputLayer(),
    "conv": ConvLayer(),
    "depthwise": DepthwiseLayer(),
    "pointwise": PointwiseLayer(),
    "batchnorm": BatchNormLayer(),
    "relu": ReluLayer(),
    "maxpool": MaxPoolLayer(),
    "dropout": DropoutLayer(),
    "dense": DenseLayer(),
    "concat": ConcatLayer(),
    "add": AddLayer(),
    "flatten": FlattenLayer(),
    "softmax-xent": SoftmaxXentLayer(),
}


# -- the graph ------------------------------------------------------------------


@dataclass
class ModelGraph:
    name: str
    input_shape: tuple
    nodes: list
    store: ParameterStore
    shapes: dict
    builder: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return self.shapes[self.nodes[-1].id][-1]

    def node(self, node_id):
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def nodes_of_kind(self, kind):
        return [n for n in self.nodes if n.kind == kind]

    def describe(self):
        return {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "name": self.name,
            "input_shape": list(self.input_shape),
            "builder": dict(self.builder),
            "nodes": [n.describe() for n in self.nodes],
        }


def param_key(node_id, name):
    return f"{node_id}/{name}"


def infer_shapes(nodes):
    """Validate wiring and return per-node output shapes (batch axis excluded)."""
    shapes = {}
    if not nodes or nodes[0].kind != "input":
        raise GraphError("graph must start with a single input node")
    if nodes[-1].kind != "softmax-xent":
        raise GraphError("graph must end with a softmax-xent node")
    for node in nodes:
        if node.id in shapes:
            raise GraphError("duplicate node id", node.id)
        layer = LAYERS.get(node.kind)
        if layer is None:
            raise GraphError(f"unknown kind {node.kind!r}", node.id)
        if node.kind == "input" and node is not nodes[0]:
            raise GraphError("only one input node is allowed", node.id)
        for src in node.inputs:
            if src not in shapes:
                raise GraphError(f"input {src!r} is undefined or not earlier in topological order", node.id)
        if layer.arity is not None and len(node.inputs) != layer.arity:
            raise GraphError(f"{node.kind} takes {layer.arity} inputs, got {len(node.inputs)}", node.id)
        if layer.arity is None and not node.inputs:
            raise GraphError(f"{node.kind} needs at least one input", node.id)
        try:
            out = tuple(int(d) for d in layer.out_shape([shapes[s] for s in node.inputs], node.config))
        except (ShapeError, DomainError) as exc:
            raise GraphError(str(exc), node.id) from None
        if any(d < 1 for d in out):
            raise GraphError(f"output shape {out} collapses below 1", node.id)
        shapes[node.id] = out
    return shapes


def init_store(nodes, shapes, seed, dtype=np.float64):
    """He-normal kernels, zero biases, unit gamma, zero beta, running stats (0, 1)."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for node in nodes:
        layer = LAYERS[node.kind]
        in_shapes = [shapes[s] for s in node.inputs]
        for name, shape in layer.param_shapes(in_shapes, node.config).items():
            fan_in = layer.fan_in(name, shape)
            if fan_in is not None:
                value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif name == "gamma":
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            store.params[param_key(node.id, name)] = value.astype(dtype)
        for name, shape in layer.buffer_shapes(in_shapes, node.config).items():
            value = np.ones(shape) if name == "running_var" else np.zeros(shape)
            store.buffers[param_key(node.id, name)] = value.astype(dtype)
    return store


def build_graph(name, input_shape, nodes, seed=0, dtype=np.float64, builder=None):
    input_shape = tuple(int(d) for d in input_shape)
    if nodes[0].kind == "input":
        nodes[0].config["shape"] = list(input_shape[1:])
    shapes = infer_shapes(nodes)
    store = init_store(nodes, shapes, seed, dtype)
    return ModelGraph(name, input_shape, nodes, store, shapes, dict(builder or {}))


def from_description(desc, seed=0, dtype=np.float64):
    if desc.get("format") != GRAPH_FORMAT:
        raise GraphError(f"not a graph description (format={desc.get('format')!r})")
    if desc.get("version") != GRAPH_VERSION:
        raise GraphError(f"unsupported graph description version {desc.get('version')!r}")
    nodes = [LayerNode(d["id"], d["kind"], dict(d["config"]), list(d["inputs"])) for d in desc["nodes"]]
    return build_graph(desc["name"], desc["input_shape"], nodes, seed, dtype, desc.get("builder"))


def count_parameters(model):
    return int(sum(p.size for p in model.store.params.values()))


def _node_params(model, node, table):
    layer = LAYERS[node.kind]
    in_shapes = [model.shapes[s] for s in node.inputs]
    names = list(layer.param_shapes(in_shapes, node.config)) if in_shapes else []
    return {n: table[param_key(node.id, n)] for n in names}


def _node_buffers(model, node):
    layer = LAYERS[node.kind]
    in_shapes = [model.shapes[s] for s in node.inputs]
    names = list(layer.buffer_shapes(in_shapes, node.config)) if in_shapes else []
    return {n: model.store.buffers[param_key(node.id, n)] for n in names}


@dataclass
class Tape:
    outputs: dict
    contexts: dict
    logits: np.ndarray
    mode: str


def forward(model, batch, mode="infer", rng=None, update_stats=True, keep=True):
    """Evaluate every node in topological order.

    In train mode batch-norm running statistics are written back to the
    store unless ``update_stats`` is false. ``keep=False`` drops the
    per-node activations and contexts (inference only).
    """
    if mode not in ("train", "infer"):
        raise DomainError(f"unknown mode {mode!r}")
    batch = np.asarray(batch)
    expected = tuple(model.input_shape[1:])
    if batch.ndim == 2 and len(expected) > 1 and batch.shape[1] == int(np.prod(expected)):
        # flat row-major vectors are unpacked to the model's image layout
        batch = batch.reshape((batch.shape[0],) + expected)
    if batch.ndim != len(model.input_shape) or tuple(batch.shape[1:]) != expected:
        raise GraphError(f"batch shape {batch.shape} does not match model input [N, {expected}]", model.nodes[0].id)
    if rng is None:
        rng = np.random.default_rng(0)
    outputs, contexts = {}, {}
    refcount = {}
    if not keep:
        for node in model.nodes:
            for s in node.inputs:
                refcount[s] = refcount.get(s, 0) + 1
    for node in model.nodes:
        if node.kind == "input":
            outputs[node.id] = batch
            continue
        layer = LAYERS[node.kind]
        xs = [outputs[s] for s in node.inputs]
        try:
            out, ctx = layer.forward(xs, _node_params(model, node, model.store.params), _node_buffers(model, node),
                                     node.config, mode, rng)
        except (ShapeError, DomainError) as exc:
            if isinstance(exc, GraphError):
                raise
            raise GraphError(str(exc), node.id) from None
        want = model.shapes[node.id]
        if tuple(out.shape[1:]) != want:
            raise GraphError(f"runtime shape {out.shape[1:]} != inferred {want}", node.id)
        new_buffers = ctx.pop("new_buffers", None) if isinstance(ctx, dict) else None
        if mode == "train" and update_stats and new_buffers:
            for name, value in new_buffers.items():
                model.store.buffers[param_key(node.id, name)] = value
        outputs[node.id] = out
        if keep:
            contexts[node.id] = ctx
        else:
            for s in node.inputs:
                refcount[s] -= 1
                if refcount[s] == 0:
                    del outputs[s]
    logits = outputs[model.nodes[-1].id]
    return Tape(outputs if keep else {}, contexts, logits, mode)


def backward(model, tape, labels, loss_scale=1.0):
    """Reverse sweep. Returns ``(loss, grads)`` with one entry per trainable parameter.

    Gradients from nodes that feed several consumers are summed.
    """
    if not tape.contexts:
        raise GraphError("tape holds no contexts; run forward with keep=True")
    loss, g_logits = nn.softmax_cross_entropy(tape.logits, labels)
    out_grads = {model.nodes[-1].id: g_logits * loss_scale}
    grads = {}
    for node in reversed(model.nodes):
        if node.kind == "input":
            continue
        g = out_grads.pop(node.id, None)
        if g is None:
            g = np.zeros_like(tape.outputs[node.id])
        if node.kind == "softmax-xent":
            in_grads, p_grads = [g], {}
        else:
            try:
                in_grads, p_grads = LAYERS[node.kind].backward(tape.contexts[node.id], g)
            except ShapeError as exc:
                raise GraphError(str(exc), node.id) from None
        for name, value in p_grads.items():
            grads[param_key(node.id, name)] = value
        for src, gi in zip(node.inputs, in_grads):
            if src in out_grads:
                out_grads[src] = out_grads[src] + gi
            else:
                out_grads[src] = gi
    for key, value in model.store.params.items():
        if key not in grads:
            grads[key] = np.zeros_like(value)
    return loss * loss_scale, grads


def predict_proba(model, images, batch_size=256):
    probs = []
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size].astype(next(iter(model.store.params.values())).dtype, copy=False)
        tape = forward(model, chunk, mode="infer", keep=False)
        probs.append(nn.softmax(tape.logits))
    if not probs:
        return np.zeros((0, model.num_classes))
    return np.concatenate(probs, axis=0)
