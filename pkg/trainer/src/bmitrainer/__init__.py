"""Training component: DenseNet+SE BMI regression, fine-tuning, export."""

from .model import BACKBONES, BmiRegressor, ModelSpec, SqueezeExcite, build_model
from .train import DivergenceError, TrainConfig, TrainResult, train
from .finetune import STRATEGIES, apply_strategy, finetune, frozen_checksum
from .export import ExportError, export_model, load_artifact, read_artifact_metadata

__version__ = "0.1.0"
