"""Any-resolution ViT features: sliding-window teachers distilled into single-pass students."""

from .tensor import bilinear_resize, l2_normalize_channels, mse
from .vit import ModelParams, ViTConfig, backward_tail, forward, forward_window, init_params
from .window import WindowPlan, min_upsample_factor, plan_windows, stitch_features, stitch_predictions

__all__ = [
    "ModelParams",
    "ViTConfig",
    "WindowPlan",
    "backward_tail",
    "bilinear_resize",
    "forward",
    "forward_window",
    "init_params",
    "l2_normalize_channels",
    "min_upsample_factor",
    "mse",
    "plan_windows",
    "stitch_features",
    "stitch_predictions",
]
