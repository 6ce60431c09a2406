"""Next-interval link-state predictor (encoder-only attention regressor)."""

from .infer import ChannelModel, Forecaster, LinkForecast, load_checkpoint, predict_link_state, save_checkpoint
from .model import (
    PARAM_NAMES,
    FastKernel,
    PredictorConfig,
    attention_weights,
    backward,
    backward_last,
    forward,
    forward_last,
    init_params,
    positional_encode,
    predict,
)
from .train import (
    Normalizer,
    SeriesDataset,
    TrainingError,
    TrainResult,
    chronological_split,
    gradient_check,
    train,
    windows_from_history,
    windows_from_series,
)

__all__ = [
    "PARAM_NAMES", "ChannelModel", "FastKernel", "Forecaster", "LinkForecast", "Normalizer", "PredictorConfig",
    "SeriesDataset", "TrainResult", "TrainingError", "attention_weights", "backward", "backward_last",
    "chronological_split", "forward", "forward_last", "gradient_check", "init_params", "load_checkpoint",
    "positional_encode", "predict", "predict_link_state", "save_checkpoint", "train", "windows_from_history",
    "windows_from_series",
]
