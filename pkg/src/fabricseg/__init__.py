"""fabricseg: size-invariant 3D semantic segmentation with a dense residual
convolutional fabric, trained from scratch (numpy autodiff core with optional
compiled kernels)."""

from .fabric import FabricConfig
from .network import NetworkConfig, build, export_feature_maps, replace_head
from .tensor import GradTape, ParamGroup, Parameter, Tensor5

__version__ = "0.1.0"

__all__ = [
    "FabricConfig",
    "NetworkConfig",
    "build",
    "replace_head",
    "export_feature_maps",
    "GradTape",
    "ParamGroup",
    "Parameter",
    "Tensor5",
    "__version__",
]
