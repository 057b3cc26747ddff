"""Run configuration: a flat ``key = value`` document with dotted keys.

Example::

    # tiny MNIST run
    seed = 1
    model.name = mbinception
    model.n = 8
    data.name = mnist
    data.root = /data/mnist
    train.epochs = 3

Values are coerced to the type of the key's default. Lists are written as
comma-separated values.
"""

import hashlib
import os

from .errors import ConfigError
from .optim import NADAM_DEFAULTS

# ``None`` in a default marks a key without a usable default
DEFAULTS = {
    "seed": None,
    "model.name": "mbinception",
    "model.n": 8,
    "model.stage_multipliers": (1, 2, 4, 8),
    # 3-epoch desk runs learn more reliably without in-block dropout
    "model.dropout_rates": (0.0, 0.5),
    "model.stem_filters": 0,
    "model.width": 16,
    "model.depth": 4,
    "data.name": "mnist",
    "data.root": "",
    "data.train_limit": 10000,
    "data.test_limit": 2000,
    "data.val_fraction": 0.1,
    "data.resize": "pad",
    "optim.name": "nadam",
    "optim.eta": 0.01,
    "optim.beta1": NADAM_DEFAULTS["beta1"],
    "optim.beta2": NADAM_DEFAULTS["beta2"],
    "optim.eps": NADAM_DEFAULTS["eps"],
    "optim.lr": 0.01,
    "train.batch_size": 32,
    "train.epochs": 3,
    "train.schedule": "linear",
    "train.dtype": "float64",
    "eval.bins": 20,
    "output.dir": "runs",
}

_INT_TUPLES = {"model.stage_multipliers"}
_FLOAT_TUPLES = {"model.dropout_rates"}
# keys that do not change what is computed
_UNHASHED = {"seed", "output.dir"}


def _coerce(key, value):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    text = value.strip() if isinstance(value, str) else value
    try:
        if key in _INT_TUPLES:
            items = text.split(",") if isinstance(text, str) else text
            return tuple(int(v) for v in items)
        if key in _FLOAT_TUPLES:
            items = text.split(",") if isinstance(text, str) else text
            return tuple(float(v) for v in items)
        if key == "seed":
            return int(text)
        if isinstance(default, bool):
            return str(text).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return str(text)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def parse_text(text, source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, value)
    return values


def parse_overrides(items):
    values = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), value)
    return values


class RunConfig(dict):
    """Fully resolved configuration; keys are the dotted names in ``DEFAULTS``."""

    @classmethod
    def resolve(cls, path=None, overrides=None, **values):
        cfg = cls(DEFAULTS)
        if path:
            try:
                with open(path) as fh:
                    cfg.update(parse_text(fh.read(), path))
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg.update(parse_overrides(overrides))
        cfg.update({k: _coerce(k, v) for k, v in values.items()})
        cfg.validate()
        return cfg

    def validate(self):
        from .data import CLASS_COUNTS
        from .optim import OPTIMIZERS, SCHEDULES
        from .zoo import BUILDERS

        if self["seed"] is None:
            raise ConfigError("seed is mandatory")
        if self["model.name"] not in BUILDERS:
            raise ConfigError(f"unknown model {self['model.name']!r}")
        if self["data.name"] not in CLASS_COUNTS:
            raise ConfigError(f"unknown dataset {self['data.name']!r}")
        if self["optim.name"] not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self['optim.name']!r}")
        if self["train.schedule"] not in SCHEDULES:
            raise ConfigError(f"train.schedule must be one of {list(SCHEDULES)}, got {self['train.schedule']!r}")
        if self["train.dtype"] not in ("float64", "float32"):
            raise ConfigError(f"train.dtype must be float64 or float32, got {self['train.dtype']!r}")
        if self["train.epochs"] < 0 or self["train.batch_size"] < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        if len(self["model.dropout_rates"]) != 2:
            raise ConfigError("model.dropout_rates takes two values (block, head)")

    def to_text(self):
        lines = []
        for key in sorted(self):
            value = self[key]
            if isinstance(value, tuple):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def as_json(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.items())}

    def digest(self):
        hashed = RunConfig({k: v for k, v in self.items() if k not in _UNHASHED})
        return hashlib.sha256(hashed.to_text().encode()).hexdigest()[:10]

    def run_dir(self):
        return os.path.join(self["output.dir"], f"{self['model.name']}-{self.digest()}-s{self['seed']}")

    def model_kwargs(self):
        name = self["model.name"]
        if name == "mbinception":
            return {
                "n": self["model.n"],
                "stage_multipliers": self["model.stage_multipliers"],
                "dropout_rates": self["model.dropout_rates"],
                "stem_filters": self["model.stem_filters"] or None,
            }
        if name == "dense-only":
            return {"hidden": self["model.width"]}
        return {"width": self["model.width"], "depth": self["model.depth"]}

    def optimizer_kwargs(self):
        if self["optim.name"] == "nadam":
            return {k: self[f"optim.{k}"] for k in ("eta", "beta1", "beta2", "eps")}
        return {"lr": self["optim.lr"]}
