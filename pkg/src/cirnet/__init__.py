"""Desk-scale RGB-D salient object detection on numpy, with its own autodiff and metrics."""
from .model import CirNet, ModelConfig, TrainConfig, forward, load_checkpoint, loss, save_checkpoint
from .tensor import Tensor, make_rng

__version__ = "0.1.0"

__all__ = ["CirNet", "ModelConfig", "Tensor", "TrainConfig", "forward", "load_checkpoint", "loss",
           "make_rng", "save_checkpoint"]
