"""Cross-modality relevance models in numpy with a from-scratch autodiff core."""

from .baseline import entity_bag_baseline
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, ModelConfig, OptimConfig, RunConfig, TrainConfig, desk_config, tiny_config
from .data import DataError, Dataset, GeneratorSpec, SyntheticExample, brute_force_label, generate, read_jsonl, write_jsonl
from .estimator import CMRClassifier
from .model import forward, init_params, make_batch
from .tensor import GradCheckReport, ShapeError, Tensor, grad_check
from .training import ablate, accuracy, train

__version__ = "0.1.0"

__all__ = [
    "CMRClassifier",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "Dataset",
    "GeneratorSpec",
    "GradCheckReport",
    "ModelConfig",
    "OptimConfig",
    "RunConfig",
    "ShapeError",
    "SyntheticExample",
    "Tensor",
    "TrainConfig",
    "ablate",
    "accuracy",
    "brute_force_label",
    "desk_config",
    "entity_bag_baseline",
    "forward",
    "generate",
    "grad_check",
    "init_params",
    "make_batch",
    "read_jsonl",
    "tiny_config",
    "train",
    "write_jsonl",
]
