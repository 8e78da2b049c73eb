from .dispatch import backend_mode, use_numba, HAS_NUMBA
from .convops import conv2d_forward, conv2d_backward_input, conv2d_backward_weight
from .render import raycast
from .pointops import scatter_min_depth, cluster_labels
from .imageops import resize_bilinear, foreground_bbox

__all__ = [
    "backend_mode", "use_numba", "HAS_NUMBA",
    "conv2d_forward", "conv2d_backward_input", "conv2d_backward_weight",
    "raycast", "scatter_min_depth", "cluster_labels",
    "resize_bilinear", "foreground_bbox",
]
