"""Efficient pyramid network for single-image snow removal."""

from .network import EfficientPyramidNet, ModelConfig, build_model, load_checkpoint, save_checkpoint

__all__ = ["EfficientPyramidNet", "ModelConfig", "build_model", "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
