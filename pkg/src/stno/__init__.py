"""Spatiotemporal neural-operator video super-resolution on a small numpy autograd."""

from .model import STNO, ModelConfig
from .synthetic import DataConfig, make_dataset
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = ["STNO", "ModelConfig", "DataConfig", "TrainConfig", "make_dataset", "train_loop", "__version__"]
