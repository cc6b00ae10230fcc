"""Learned regression initializer: inputs, data generation, network and training."""

from .dataset import TrainingSample, generate_dataset, load_dataset, reference_images, save_dataset
from .inputs import InitializerVariant, build_input, channel_count
from .model import (
    RegressorModel,
    TrainingConfig,
    forward,
    load_model,
    predict_initial_pose,
    predict_many,
    save_model,
    train,
)

__all__ = [
    "InitializerVariant",
    "RegressorModel",
    "TrainingConfig",
    "TrainingSample",
    "build_input",
    "channel_count",
    "forward",
    "generate_dataset",
    "load_dataset",
    "load_model",
    "predict_initial_pose",
    "predict_many",
    "reference_images",
    "save_dataset",
    "save_model",
    "train",
]
