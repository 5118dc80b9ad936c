"""Minimal feedforward network runtime."""

from .layers import BatchNorm, Conv2D, Dense, Flatten, Layer, ReLU, ShapeError, Softmax
from .model import (ActivationTrace, ManifestError, Model, NonFiniteError, accuracy, forward,
                    forward_trace, load_model, mlp, model_digest, predict, run, save_model)
from .quant import quantize, quantize_tensor
from .train import grad_check, loss_value, parameter_gradients, train_sgd

__all__ = [
    "ActivationTrace", "BatchNorm", "Conv2D", "Dense", "Flatten", "Layer", "ManifestError",
    "Model", "NonFiniteError", "ReLU", "ShapeError", "Softmax", "accuracy", "forward",
    "forward_trace", "grad_check", "load_model", "loss_value", "mlp", "model_digest",
    "parameter_gradients", "predict", "quantize", "quantize_tensor", "run", "save_model",
    "train_sgd",
]
