"""Convolutional encoder-decoder mapping microstructures to coarse stress fields."""
from .layers import (LayerDimError, LayerSpec, conv2d, conv_forward, conv_out, maxpool2d,
                     maxpool_forward, maxpool_out, tconv2d, tconv_forward, tconv_out)
from .model import (CedModel, architecture, backward, evaluate_mse, forward, init_params,
                    load_checkpoint, loss_and_grad, loss_mse, per_pixel, predict,
                    save_checkpoint)
from .optim import Adam, adam_step, cyclic_lr
from .train import History, TrainConfig, TrainingDiverged, train

__all__ = [
    "Adam", "CedModel", "History", "LayerDimError", "LayerSpec", "TrainConfig",
    "TrainingDiverged", "adam_step", "architecture", "backward", "conv2d", "conv_forward",
    "conv_out", "cyclic_lr", "evaluate_mse", "forward", "init_params", "load_checkpoint",
    "loss_and_grad", "loss_mse", "maxpool2d", "maxpool_forward", "maxpool_out", "per_pixel",
    "predict", "save_checkpoint", "tconv2d", "tconv_forward", "tconv_out", "train",
]
