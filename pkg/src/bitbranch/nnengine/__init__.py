"""Minimal reverse-mode training core for binary networks."""

from bitbranch.nnengine.layers import (
    ActSign,
    ActZeroOne,
    AvgPool2d,
    BatchNorm2d,
    GlobalAvgPool,
    Identity,
    Layer,
    Linear,
    Model,
    PReLU,
    QuantConv2d,
    Sequential,
    pixel_softmax_cross_entropy,
    softmax_cross_entropy,
)
from bitbranch.nnengine.optim import Adam, TrainConfig, linear_lr
from bitbranch.nnengine.rng import make_rng
from bitbranch.nnengine.tensor import EngineError, NanError, Parameter, check_finite
from bitbranch.nnengine.train import (
    EpochStats,
    StageResult,
    evaluate,
    train_stage,
    two_stage_train,
)

__all__ = [
    "ActSign",
    "ActZeroOne",
    "Adam",
    "AvgPool2d",
    "BatchNorm2d",
    "EngineError",
    "EpochStats",
    "GlobalAvgPool",
    "Identity",
    "Layer",
    "Linear",
    "Model",
    "NanError",
    "PReLU",
    "Parameter",
    "QuantConv2d",
    "Sequential",
    "StageResult",
    "TrainConfig",
    "check_finite",
    "evaluate",
    "linear_lr",
    "make_rng",
    "pixel_softmax_cross_entropy",
    "softmax_cross_entropy",
    "train_stage",
    "two_stage_train",
]
