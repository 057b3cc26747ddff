"""Parameter update rules: NADAM and plain SGD."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError

NADAM_DEFAULTS = {"eta": 0.002, "beta1": 0.9, "beta2": 0.999, "eps": 1e-6}


@dataclass
class NadamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, theta):
        return cls(np.zeros_like(theta), np.zeros_like(theta), 0)


def _check(theta, grad, name):
    if grad.shape != theta.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {theta.shape} ({name or 'unnamed'})")
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient for parameter {name or 'unnamed'}")


def nadam_moments(grad, state, beta1=0.9, beta2=0.999):
    """Return ``(m, v, m_hat, v_hat)`` for the step after ``state``.

    The bias-corrected estimates are formed as ``a * previous + b * g`` with
    ``b = (1 - beta) / (1 - beta**t)``; at t=1 that weight is exactly 1, so
    ``m_hat == g`` and ``v_hat == g*g`` hold bit for bit.
    """
    t = state.t + 1
    g2 = grad * grad
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * g2
    bc1, bc2 = 1.0 - beta1**t, 1.0 - beta2**t
    m_hat = (beta1 / bc1) * state.m + ((1.0 - beta1) / bc1) * grad
    v_hat = (beta2 / bc2) * state.v + ((1.0 - beta2) / bc2) * g2
    return m, v, m_hat, v_hat


def nadam_step(theta, grad, state, eta=0.002, beta1=0.9, beta2=0.999, eps=1e-6, name=None,
               eps_inside_root=True):
    """One NADAM update. Returns ``(new_theta, new_state)``; inputs are not mutated.

    The step divides by ``sqrt(v_hat + eps)``. ``eps_inside_root=False``
    switches to the more common ``sqrt(v_hat) + eps`` denominator.
    """
    _check(theta, grad, name)
    t = state.t + 1
    m, v, m_hat, v_hat = nadam_moments(grad, state, beta1, beta2)
    denom = np.sqrt(v_hat + eps) if eps_inside_root else np.sqrt(v_hat) + eps
    direction = beta1 * m_hat + ((1.0 - beta1) / (1.0 - beta1**t)) * grad
    return theta - eta / denom * direction, NadamState(m, v, t)


def sgd_step(theta, grad, lr, name=None):
    _check(theta, grad, name)
    return theta - lr * grad


class Nadam:
    def __init__(self, eta=0.002, beta1=0.9, beta2=0.999, eps=1e-6, eps_inside_root=True):
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.eta = eta
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.eps_inside_root = eps_inside_root
        self.states = {}

    name = "nadam"

    def hyperparameters(self):
        return {"eta": self.eta, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "eps_inside_root": self.eps_inside_root}

    def update(self, name, theta, grad):
        state = self.states.get(name)
        if state is None:
            state = NadamState.zeros_like(theta)
        theta, self.states[name] = nadam_step(
            theta, grad, state, self.eta, self.beta1, self.beta2, self.eps, name, self.eps_inside_root
        )
        return theta

    def state_arrays(self):
        """Flat ``{key: array}`` view used by checkpoints."""
        out = {}
        for name, st in self.states.items():
            out[f"{name}#m"] = st.m
            out[f"{name}#v"] = st.v
            out[f"{name}#t"] = np.array([float(st.t)])
        return out

    def load_state_arrays(self, arrays):
        self.states = {}
        for key in arrays:
            if key.endswith("#m"):
                name = key[:-2]
                self.states[name] = NadamState(
                    arrays[f"{name}#m"], arrays[f"{name}#v"], int(arrays[f"{name}#t"][0])
                )


class SGD:
    name = "sgd"

    def __init__(self, lr=0.01):
        self.lr = lr

    def hyperparameters(self):
        return {"lr": self.lr}

    def update(self, name, theta, grad):
        return sgd_step(theta, grad, self.lr, name)

    def state_arrays(self):
        return {}

    def load_state_arrays(self, arrays):
        pass


OPTIMIZERS = {"nadam": Nadam, "sgd": SGD}
SCHEDULES = ("constant", "linear")


def scheduled_rate(base, step, total, schedule="constant"):
    """Step size for 0-based ``step`` of ``total``; "linear" decays to base/total on the last step."""
    if schedule == "constant":
        return base
    if schedule == "linear":
        return base * (1.0 - step / total)
    raise ConfigError(f"unknown schedule {schedule!r}; choose from {list(SCHEDULES)}")


def set_rate(optimizer, rate):
    setattr(optimizer, "eta" if optimizer.name == "nadam" else "lr", rate)


def make_optimizer(name, **hyper):
    try:
        cls = OPTIMIZERS[name]
    except KeyError:
        raise ConfigError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None
    return cls(**hyper)


def apply_updates(store, grads, optimizer):
    """Update every trainable parameter in ``store.params`` in place (dict rebinding).

    ``grads`` must cover exactly the parameter keys; silent skips are refused.
    """
    params = store.params if hasattr(store, "params") else store
    missing = sorted(set(params) - set(grads))
    extra = sorted(set(grads) - set(params))
    if missing or extra:
        raise ConfigError(f"gradient keys do not match parameters: missing={missing} extra={extra}")
    for name in params:
        params[name] = optimizer.update(name, params[name], grads[name])
