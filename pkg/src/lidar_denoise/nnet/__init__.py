"""Minimal dense-tensor CNN engine and the WeatherNet segmentation network."""

from .layers import ConvSpec, conv2d, conv2d_backward, softmax, softmax_cross_entropy
from .model import (
    LiLaBlockSpec,
    WeatherNet,
    WeatherNetSpec,
    lila_param_count,
    load_checkpoint,
    save_checkpoint,
    weathernet_forward,
)
from .optim import AdamState, adam_step
from .train import (
    TrainConfig,
    TrainingDiverged,
    desk_config,
    gradient_check,
    predict_and_denoise,
    predict_labels,
    tile_crops,
    train,
)

__all__ = [
    "AdamState", "ConvSpec", "LiLaBlockSpec", "TrainConfig", "TrainingDiverged", "WeatherNet", "WeatherNetSpec",
    "adam_step", "conv2d", "conv2d_backward", "desk_config", "gradient_check", "lila_param_count",
    "load_checkpoint", "predict_and_denoise", "predict_labels", "save_checkpoint", "softmax",
    "softmax_cross_entropy", "tile_crops", "train", "weathernet_forward",
]
