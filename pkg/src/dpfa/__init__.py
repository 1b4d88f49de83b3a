"""DPFA-Net: dynamic point feature aggregation for point clouds, on a small numpy autodiff engine."""

from .kernels import BACKEND
from .tensor import Graph, Tensor, grad_check, no_grad
from .knn_graph import knn
from .fa_layer import FALayer
from .networks import ClsNet, SegNet, build_network
from .config import RunConfig, load_config, parse_config
from .data import LabeledCloud, load_cloud, save_cloud
from .metrics import MetricsReport

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Graph", "Tensor", "grad_check", "no_grad", "knn", "FALayer", "ClsNet", "SegNet", "build_network",
    "RunConfig", "load_config", "parse_config", "LabeledCloud", "load_cloud", "save_cloud", "MetricsReport",
]
