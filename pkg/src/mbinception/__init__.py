"""Multi-block inception networks and baselines on a small numpy engine."""

from .graph import ModelGraph, count_parameters
from .zoo import build, build_mbinception, build_mobilenet_style, build_resnet_style, build_vgg_style

__version__ = "0.1.0"
