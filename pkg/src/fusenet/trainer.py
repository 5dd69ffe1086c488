"""Adam optimizer, training loop with best-validation selection, evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .errors import ConfigurationError, DataError, TrainingError
from .fusion import FusionModel
from .metrics import ConfusionMatrix, MetricsReport, compute_metrics, confusion, roc_auc
from .ops import nll_loss
from .rng import Rng, mix_seed
from .tensor import Tensor, backward, no_grad


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 0.003
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dropout_p: float = 0.2
    class_count: int = 2
    select_best: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ConfigurationError(f"Adam eps must be positive, got {self.eps}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigurationError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.class_count < 2:
            raise ConfigurationError(f"class_count must be >= 2, got {self.class_count}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update of every parameter from its ``grad``."""
    for name, p in params.items():
        if p.grad is None:
            raise TrainingError(f"parameter {name} has no gradient; run backward before adam_step")
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        dt = p.data.dtype.type
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = state.v[name] = dt(b2) * state.v[name] + dt(1 - b2) * (g * g)
        m_hat = m / dt(1 - b1**t)
        v_hat = v / dt(1 - b2**t)
        p.data = p.data - dt(config.learning_rate) * m_hat / (np.sqrt(v_hat) + dt(config.eps))


# ---------------------------------------------------------------- records


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: Optional[float]
    timestamp: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "train_loss": self.train_loss, "val_accuracy": self.val_accuracy}, sort_keys=True
        )


@dataclass
class TrainRecord:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    config: dict = field(default_factory=dict)

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch - 1]

    def to_jsonl(self) -> str:
        """One JSON object per epoch (epoch, train_loss, val_accuracy); timestamps are omitted."""
        return "".join(e.to_json() + "\n" for e in self.epochs)


# ---------------------------------------------------------------- prediction helpers


def hard_predictions(log_probs: np.ndarray) -> np.ndarray:
    """Binary decision from the first two outputs (labels 0 and 1)."""
    return (log_probs[:, 1] > log_probs[:, 0]).astype(np.int64)


def predict_log_probs(model: FusionModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    dtype = next(iter(model.params.values())).data.dtype
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = Tensor(images[start : start + batch_size], dtype=dtype)
            out.append(model.forward(batch, training=False).log_probs.data)
    return np.concatenate(out, axis=0)


def _accuracy(model: FusionModel, dataset: Dataset) -> float:
    pred = hard_predictions(predict_log_probs(model, dataset.images))
    return float(np.mean(pred == dataset.labels))


def _check_dataset(model: FusionModel, dataset: Dataset, what: str) -> None:
    if len(dataset) == 0:
        raise DataError(f"{what} split is empty")
    if tuple(dataset.image_size) != tuple(model.input_size):
        raise DataError(f"{what} images are {dataset.image_size}, model expects {model.input_size}")
    bad = np.flatnonzero((dataset.labels < 0) | (dataset.labels >= model.class_count))
    if bad.size:
        raise DataError(f"{what} sample {int(bad[0])}: label {int(dataset.labels[bad[0]])} out of range")


# ---------------------------------------------------------------- training


def train(
    model: FusionModel,
    train_set: Dataset,
    val_set: Optional[Dataset],
    config: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    on_batch: Optional[Callable[[int, np.ndarray], None]] = None,
) -> Tuple[Checkpoint, TrainRecord]:
    """Train with Adam; keep the epoch with the highest validation accuracy.

    Each epoch shuffles the training set with a seed derived from
    ``(config.seed, epoch)``, trains on every batch (the last one may be
    partial), then scores the validation set with dropout off. Ties in
    validation accuracy go to the earliest epoch. On return the model holds
    the selected epoch's parameters.
    """
    if config.class_count != model.class_count:
        raise ConfigurationError(f"config class_count {config.class_count} != model class_count {model.class_count}")
    if not math.isclose(config.dropout_p, model.dropout_p):
        raise ConfigurationError(f"config dropout_p {config.dropout_p} != model dropout_p {model.dropout_p}")
    _check_dataset(model, train_set, "training")
    if val_set is None or len(val_set) == 0:
        if config.select_best:
            raise DataError("validation split is empty; best-epoch selection needs validation data")
        val_set = None
    else:
        _check_dataset(model, val_set, "validation")

    dtype = next(iter(model.params.values())).data.dtype
    images = np.asarray(train_set.images, dtype=dtype)
    labels = train_set.labels
    n = len(train_set)
    state = AdamState()
    record = TrainRecord(config=config.to_dict())
    best_acc, best_state = None, None

    for epoch in range(1, config.epochs + 1):
        epoch_seed = mix_seed(config.seed, epoch)
        order = Rng(epoch_seed).permutation(n)
        dropout_rng = Rng(epoch_seed).spawn(1)
        loss_sum = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            if on_batch is not None:
                on_batch(epoch, idx)
            pred = model.forward(Tensor(images[idx], dtype=dtype), training=True, rng=dropout_rng)
            loss = nll_loss(pred.log_probs, labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            model.zero_grad()
            backward(loss)
            adam_step(model.params, state, config)
            loss_sum += value * len(idx)
        val_acc = _accuracy(model, val_set) if val_set is not None else None
        entry = EpochRecord(epoch, loss_sum / n, val_acc, time.time())
        record.epochs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if not config.select_best or best_acc is None or val_acc > best_acc:
            best_acc, best_state = val_acc, model.state_dict()
            record.best_epoch = epoch

    model.load_state_dict(best_state)
    metadata = {"epoch": record.best_epoch, "val_accuracy": best_acc, "seed": config.seed, "train": config.to_dict()}
    return Checkpoint(model.config(), best_state, metadata), record


# ---------------------------------------------------------------- evaluation


def evaluate(model_or_checkpoint, dataset: Dataset, batch_size: int = 64) -> Tuple[ConfusionMatrix, MetricsReport, np.ndarray]:
    """Confusion matrix, all eight metrics and the positive-class scores on ``dataset``."""
    model = model_or_checkpoint.build_model() if isinstance(model_or_checkpoint, Checkpoint) else model_or_checkpoint
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    bad = np.flatnonzero((dataset.labels != 0) & (dataset.labels != 1))
    if bad.size:
        raise DataError(f"sample {int(bad[0])}: label {int(dataset.labels[bad[0]])} is not binary")
    if tuple(dataset.image_size) != tuple(model.input_size):
        raise DataError(f"images are {dataset.image_size}, model expects {model.input_size}")
    log_probs = predict_log_probs(model, dataset.images, batch_size)
    scores = np.exp(log_probs[:, 1].astype(np.float64))
    cm = confusion(hard_predictions(log_probs), dataset.labels)
    report = compute_metrics(cm).with_auc(roc_auc(scores, dataset.labels))
    return cm, report, scores
