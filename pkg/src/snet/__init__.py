"""Stagger network: a hybrid CNN/ViT segmentation model on a small numpy autodiff core."""

from .model import NetworkConfig, SNet, ablate, build, forward

__all__ = ["NetworkConfig", "SNet", "ablate", "build", "forward"]
__version__ = "0.1.0"
