"""Small float64 autodiff engine, residual CNN, Adam and training loop."""

from .estimator import ConcentrationReconstructor
from .model import ModelConfig, init_params, model_forward
from .tensor import Tensor
from .train import TrainConfig, train

__all__ = ["ConcentrationReconstructor", "ModelConfig", "Tensor", "TrainConfig", "init_params",
           "model_forward", "train"]
