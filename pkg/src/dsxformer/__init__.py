"""DSXFormer: window-attention transformer for hyperspectral pixel classification."""

from .data import HSICube, SplitSpec, extract_pixel_patches, load_cube, pca_reduce, save_cube, split_train_test
from .encoder import ModelConfig, ModelParams, forward_logits, load_checkpoint, model_forward, save_checkpoint
from .errors import ConfigError, DataError, DivergenceError, DSXError, FormatError, NumericError
from .metrics import metrics
from .train import TrainConfig, evaluate, predict_map, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DivergenceError", "DSXError", "FormatError", "HSICube", "ModelConfig",
    "ModelParams", "NumericError", "SplitSpec", "TrainConfig", "evaluate", "extract_pixel_patches",
    "forward_logits", "load_checkpoint", "load_cube", "metrics", "model_forward", "pca_reduce",
    "predict_map", "save_checkpoint", "save_cube", "split_train_test", "train",
]
