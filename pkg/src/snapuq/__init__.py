"""Single-pass uncertainty from depth-wise next-activation surprisal."""

from .model import SnapModel, build_model, load_model, save_model
from .nnet import conv_spec, forward_collect, mlp_spec

__all__ = ["SnapModel", "build_model", "load_model", "save_model", "conv_spec",
           "forward_collect", "mlp_spec"]
