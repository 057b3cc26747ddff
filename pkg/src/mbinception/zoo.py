"""Architecture builders.

``build_mbinception`` is the multi-block inception network; the other
builders are small VGG/ResNet/MobileNet-style baselines sized for 32x32
inputs. All builders return a :class:`~mbinception.graph.ModelGraph` with
freshly initialized parameters.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GraphError
from .graph import LayerNode, build_graph

DEFAULT_INPUT = (1, 32, 32, 3)


@dataclass(frozen=True)
class InceptionConfig:
    """Channel allocation of one four-branch inception module.

    Branches: 1x1; 1x1 reduce -> 3x3; 1x1 reduce -> 5x5; 3x3 max pool -> 1x1.
    Reducers are linear: at small budgets they are a single channel, and a
    ReLU there silences the whole branch whenever that channel goes negative.
    """

    branch1: int
    reduce3: int
    branch3: int
    reduce5: int
    branch5: int
    pool_proj: int

    @property
    def filters(self):
        return self.branch1 + self.branch3 + self.branch5 + self.pool_proj

    @classmethod
    def for_budget(cls, f):
        if f < 4 or f % 4:
            raise ConfigError(f"inception filter budget must be a positive multiple of 4, got {f}")
        quarter = f // 4
        reduce = max(f // 8, 1)
        return cls(quarter, reduce, quarter, reduce, quarter, quarter)


class _Net:
    def __init__(self, input_shape):
        self.nodes = [LayerNode("input", "input", {"shape": list(input_shape[1:])}, [])]

    def add(self, node_id, kind, inputs, **config):
        if isinstance(inputs, str):
            inputs = [inputs]
        self.nodes.append(LayerNode(node_id, kind, config, list(inputs)))
        return node_id

    def conv(self, node_id, x, filters, kernel, stride=1, padding="same"):
        return self.add(node_id, "conv", x, filters=filters, kernel=kernel, stride=stride, padding=padding)

    def conv_bn_relu(self, prefix, x, filters, kernel, stride=1):
        x = self.conv(f"{prefix}/conv", x, filters, kernel, stride)
        x = self.add(f"{prefix}/bn", "batchnorm", x)
        return self.add(f"{prefix}/relu", "relu", x)

    def head(self, x, num_classes, rate=None):
        x = self.add("head/flatten", "flatten", x)
        if rate:
            x = self.add("head/dropout", "dropout", x, rate=rate)
        x = self.add("head/dense", "dense", x, units=num_classes)
        self.add("loss", "softmax-xent", x)


def _check_input(input_shape, num_classes):
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != 4 or any(d < 1 for d in input_shape):
        raise ConfigError(f"input_shape must be [N, H, W, C] with positive entries, got {input_shape}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    return input_shape


def _finish(name, input_shape, net, seed, dtype, builder):
    try:
        return build_graph(name, input_shape, net.nodes, seed, dtype, builder)
    except GraphError as exc:
        stage = exc.node_id.split("/")[0] if exc.node_id else "?"
        raise ConfigError(f"{name}: {exc} (stage {stage})") from None


# -- MBInception -----------------------------------------------------------------


def inception_module(net, prefix, x, cfg):
    b1 = net.conv(f"{prefix}/b1", x, cfg.branch1, 1)
    r3 = net.conv(f"{prefix}/b3_reduce", x, cfg.reduce3, 1)
    b3 = net.conv(f"{prefix}/b3", r3, cfg.branch3, 3)
    r5 = net.conv(f"{prefix}/b5_reduce", x, cfg.reduce5, 1)
    b5 = net.conv(f"{prefix}/b5", r5, cfg.branch5, 5)
    p = net.add(f"{prefix}/pool", "maxpool", x, pool=3, stride=1, padding="same")
    bp = net.conv(f"{prefix}/pool_proj", p, cfg.pool_proj, 1)
    return net.add(f"{prefix}/concat", "concat", [b1, b3, b5, bp])


def first_block(net, prefix, x, filters, rate):
    cfg = InceptionConfig.for_budget(filters)
    h = net.conv(f"{prefix}/entry", x, filters, 1)
    h = inception_module(net, f"{prefix}/inception1", h, cfg)
    h = net.add(f"{prefix}/bn1", "batchnorm", h)
    h = net.add(f"{prefix}/relu1", "relu", h)
    if rate:
        h = net.add(f"{prefix}/dropout", "dropout", h, rate=rate)
    h = inception_module(net, f"{prefix}/inception2", h, cfg)
    h = net.add(f"{prefix}/bn2", "batchnorm", h)
    h = net.add(f"{prefix}/skip_concat", "concat", [h, x])
    return net.add(f"{prefix}/relu2", "relu", h)


def build_mbinception(
    input_shape=DEFAULT_INPUT,
    n=8,
    stage_multipliers=(1, 2, 4, 8),
    num_classes=10,
    dropout_rates=(0.25, 0.5),
    stem_filters=None,
    seed=0,
    dtype=np.float64,
):
    """Stem (7x7/2 conv to 4n channels by default, BN, ReLU, 3x3/2 max pool), one main block
    per stage, dense head.

    Each main block runs the first block (1x1 conv, two inception modules,
    concatenation with the block input) followed by a 3x3 conv/BN/ReLU,
    twice. Every stage's closing 3x3 conv has stride 2 except the last.
    """
    input_shape = _check_input(input_shape, num_classes)
    if n < 4 or n % 4:
        raise ConfigError(f"n must be >= 4 and divisible by 4, got {n}")
    stage_multipliers = tuple(int(m) for m in stage_multipliers)
    if not stage_multipliers or any(m < 1 for m in stage_multipliers):
        raise ConfigError(f"stage_multipliers must be positive, got {stage_multipliers}")
    block_rate, head_rate = dropout_rates
    stem_filters = int(stem_filters or 4 * n)
    net = _Net(input_shape)
    x = net.conv_bn_relu("stem", "input", stem_filters, 7, stride=2)
    x = net.add("stem/pool", "maxpool", x, pool=3, stride=2, padding="same")
    last = len(stage_multipliers) - 1
    for s, mult in enumerate(stage_multipliers):
        f = n * mult
        prefix = f"stage{s + 1}"
        x = first_block(net, f"{prefix}/pass1", x, f, block_rate)
        x = net.conv_bn_relu(f"{prefix}/pass1/proj", x, f, 3)
        x = first_block(net, f"{prefix}/pass2", x, f, block_rate)
        x = net.conv_bn_relu(f"{prefix}/pass2/proj", x, f, 3, stride=1 if s == last else 2)
    net.head(x, num_classes, head_rate)
    builder = {
        "name": "mbinception",
        "n": n,
        "stage_multipliers": list(stage_multipliers),
        "num_classes": num_classes,
        "dropout_rates": [block_rate, head_rate],
        "stem_filters": stem_filters,
    }
    return _finish("mbinception", input_shape, net, seed, dtype, builder)


# -- baselines -------------------------------------------------------------------


def _check_width_depth(width, depth, max_depth, name):
    if width < 1:
        raise ConfigError(f"{name}: width must be >= 1, got {width}")
    if not 1 <= depth <= max_depth:
        raise ConfigError(f"{name}: depth must be in [1, {max_depth}], got {depth}")


def build_vgg_style(input_shape=DEFAULT_INPUT, width=16, depth=4, num_classes=10, dropout=0.5, seed=0,
                    dtype=np.float64):
    """Stages of two 3x3 conv+ReLU layers and a 2x2 max pool; two dense layers on top."""
    input_shape = _check_input(input_shape, num_classes)
    _check_width_depth(width, depth, 5, "vgg-style")
    net = _Net(input_shape)
    x = "input"
    for s in range(depth):
        c = width * 2**s
        for i in (1, 2):
            x = net.conv(f"stage{s + 1}/conv{i}", x, c, 3)
            x = net.add(f"stage{s + 1}/relu{i}", "relu", x)
        x = net.add(f"stage{s + 1}/pool", "maxpool", x, pool=2, stride=2)
    x = net.add("head/flatten", "flatten", x)
    x = net.add("head/fc1", "dense", x, units=8 * width)
    x = net.add("head/fc1_relu", "relu", x)
    if dropout:
        x = net.add("head/dropout", "dropout", x, rate=dropout)
    x = net.add("head/dense", "dense", x, units=num_classes)
    net.add("loss", "softmax-xent", x)
    builder = {"name": "vgg-style", "width": width, "depth": depth, "num_classes": num_classes,
               "dropout": dropout}
    return _finish("vgg-style", input_shape, net, seed, dtype, builder)


def residual_block(net, prefix, x, in_channels, channels, stride):
    h = net.conv_bn_relu(f"{prefix}/a", x, channels, 3, stride)
    h = net.conv(f"{prefix}/b/conv", h, channels, 3)
    h = net.add(f"{prefix}/b/bn", "batchnorm", h)
    skip = x
    if stride != 1 or in_channels != channels:
        skip = net.conv(f"{prefix}/proj", x, channels, 1, stride)
    h = net.add(f"{prefix}/add", "add", [h, skip])
    return net.add(f"{prefix}/relu", "relu", h)


def build_resnet_style(input_shape=DEFAULT_INPUT, width=16, depth=4, num_classes=10, blocks_per_stage=2,
                       seed=0, dtype=np.float64):
    """3x3 stem, then residual blocks (identity or 1x1-projection skip), dense head."""
    input_shape = _check_input(input_shape, num_classes)
    _check_width_depth(width, depth, 5, "resnet-style")
    net = _Net(input_shape)
    x = net.conv_bn_relu("stem", "input", width, 3)
    c_prev = width
    for s in range(depth):
        c = width * 2**s
        for b in range(blocks_per_stage):
            stride = 2 if (s > 0 and b == 0) else 1
            x = residual_block(net, f"stage{s + 1}/block{b + 1}", x, c_prev, c, stride)
            c_prev = c
    net.head(x, num_classes)
    builder = {"name": "resnet-style", "width": width, "depth": depth, "num_classes": num_classes,
               "blocks_per_stage": blocks_per_stage}
    return _finish("resnet-style", input_shape, net, seed, dtype, builder)


def build_mobilenet_style(input_shape=DEFAULT_INPUT, width=16, depth=4, num_classes=10, dropout=0.5, seed=0,
                          dtype=np.float64):
    """Strided 3x3 stem, then depthwise 3x3 + pointwise 1x1 pairs doubling channels."""
    input_shape = _check_input(input_shape, num_classes)
    _check_width_depth(width, depth, 5, "mobilenet-style")
    net = _Net(input_shape)
    x = net.conv_bn_relu("stem", "input", width, 3, stride=2)
    for s in range(depth):
        prefix = f"stage{s + 1}"
        x = net.add(f"{prefix}/dw", "depthwise", x, kernel=3, stride=2 if s > 0 else 1, padding="same")
        x = net.add(f"{prefix}/dw_bn", "batchnorm", x)
        x = net.add(f"{prefix}/dw_relu", "relu", x)
        x = net.add(f"{prefix}/pw", "pointwise", x, filters=width * 2 ** (s + 1))
        x = net.add(f"{prefix}/pw_bn", "batchnorm", x)
        x = net.add(f"{prefix}/pw_relu", "relu", x)
    net.head(x, num_classes, dropout)
    builder = {"name": "mobilenet-style", "width": width, "depth": depth, "num_classes": num_classes,
               "dropout": dropout}
    return _finish("mobilenet-style", input_shape, net, seed, dtype, builder)


def build_dense_only(input_shape=(1, 4, 4, 1), hidden=8, num_classes=3, seed=0, dtype=np.float64):
    input_shape = _check_input(input_shape, num_classes)
    net = _Net(input_shape)
    x = net.add("flatten", "flatten", "input")
    x = net.add("fc1", "dense", x, units=hidden)
    x = net.add("fc1_relu", "relu", x)
    x = net.add("fc2", "dense", x, units=num_classes)
    net.add("loss", "softmax-xent", x)
    builder = {"name": "dense-only", "hidden": hidden, "num_classes": num_classes}
    return _finish("dense-only", input_shape, net, seed, dtype, builder)


BUILDERS = {
    "mbinception": build_mbinception,
    "vgg-style": build_vgg_style,
    "resnet-style": build_resnet_style,
    "mobilenet-style": build_mobilenet_style,
    "dense-only": build_dense_only,
}


def build(name, **kwargs):
    try:
        fn = BUILDERS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(BUILDERS)}") from None
    return fn(**kwargs)


def rebuild(model_description, seed=0, dtype=np.float64):
    from .graph import from_description

    return from_description(model_description, seed, dtype)
