"""Attention-dropping image classifier: local branch maps over a small CNN
stem, a token encoder with per-sample head dropping, and the training,
evaluation and visualization tooling around them.
"""

from .config import TrainConfig, build_config, load_config, save_config
from .data import Dataset, generate_synthetic_dataset, load_dataset, save_dataset
from .errors import (ConfigKeyError, ConfigurationError, ContractError, DataError,
                     DimensionError, DivergenceError, MadvitError, UsageError)
from .model import MadVit
from .regularizers import DropDecision, Mode
from .tensor import ComputationRecord, Tensor, load_tensor, no_grad, save_tensor
from .train import Metrics, TrainResult, evaluate, train
from .visualize import Heatmap, attention_rollout, render_heatmap

__version__ = "0.1.0"

__all__ = [
    "ComputationRecord", "ConfigKeyError", "ConfigurationError", "ContractError",
    "DataError", "Dataset", "DimensionError", "DivergenceError", "DropDecision",
    "Heatmap", "MadVit", "MadvitError", "Metrics", "Mode", "Tensor", "TrainConfig",
    "TrainResult", "UsageError", "attention_rollout", "build_config", "evaluate",
    "generate_synthetic_dataset", "load_config", "load_dataset", "load_tensor",
    "no_grad", "render_heatmap", "save_config", "save_dataset", "save_tensor",
    "train", "__version__",
]
