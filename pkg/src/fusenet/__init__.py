"""Parallel three-backbone feature-fusion classifier on a small numpy autodiff engine."""

from .backbones import KINDS, BackboneSpec
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, SplitPlan, load_manifest, split_dataset, synthetic_splits
from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    EvaluationError,
    FormatError,
    FusenetError,
    PrecisionError,
    ShapeError,
    TrainingError,
    UsageError,
)
from .estimator import FusionClassifier
from .fusion import FusionModel, default_specs, param_count
from .metrics import ConfusionMatrix, MetricsReport, auc, compute_metrics, roc_curve
from .rng import Rng
from .tensor import Tensor, backward, no_grad, precision
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
