"""
Multi-task training: summed per-task cross-entropy, Adam, early stopping on the mean eval
AUC, and a line-delimited history of every epoch.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import torch

from .dataset import TabularDataset, batch_iterator
from .errors import ConfigError, MetricError, NumericalError, ShapeError, TrainingDiverged
from .metrics import auc
from .models import MultiTaskNetwork, predict
from .runtime import LOGGER

LOSS_EPSILON = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings. `epochs` is the maximum; training stops earlier once the mean
    eval AUC has not improved for `patience` epochs. A zero learning rate is accepted and
    leaves every parameter untouched.
    """

    learning_rate: float = 1e-3
    batch_size: int = 2048
    epochs: int = 20
    patience: int = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_weights: Optional[Mapping[str, float]] = None
    grad_clip: Optional[float] = None
    shuffle: bool = True
    deterministic: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("must be >= 0", key_path="training.learning_rate")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", key_path="training.batch_size")
        if self.epochs < 1:
            raise ConfigError("must be >= 1", key_path="training.epochs")
        if self.patience < 1:
            raise ConfigError("must be >= 1", key_path="training.patience")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam decay rates must be in [0, 1)", key_path="training.beta1")
        if self.eps <= 0:
            raise ConfigError("must be > 0", key_path="training.eps")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("must be > 0", key_path="training.grad_clip")
        if self.loss_weights is not None:
            if any(w < 0 for w in self.loss_weights.values()):
                raise ConfigError("weights must be >= 0", key_path="training.loss_weights")
            if not any(w > 0 for w in self.loss_weights.values()):
                raise ConfigError("at least one weight must be > 0", key_path="training.loss_weights")

    def weights_for(self, tasks: Iterable[str]) -> dict[str, float]:
        tasks = list(tasks)
        if self.loss_weights is None:
            return {t: 1.0 for t in tasks}
        unknown = set(self.loss_weights) - set(tasks)
        if unknown:
            raise ConfigError(f"unknown tasks {sorted(unknown)}", key_path="training.loss_weights")
        return {t: float(self.loss_weights.get(t, 0.0)) for t in tasks}


@dataclass
class LossBreakdown:
    total: torch.Tensor
    components: dict[str, torch.Tensor]


def compute_loss(
    predictions: Mapping[str, torch.Tensor],
    labels: torch.Tensor,
    weights: Optional[Mapping[str, float]] = None,
) -> LossBreakdown:
    """
    Weighted sum of per-task mean binary cross-entropies. Label column k belongs to the
    k-th task of `predictions`. Computed in 64-bit with predictions clipped to
    [1e-7, 1 - 1e-7].
    """
    tasks = list(predictions)
    if labels.dim() != 2 or labels.shape[1] != len(tasks):
        raise ShapeError(f"labels of shape {tuple(labels.shape)} for {len(tasks)} tasks")
    weights = weights if weights is not None else {t: 1.0 for t in tasks}
    components = {}
    total = None
    for k, task in enumerate(tasks):
        p = predictions[task].double()
        y = labels[:, k].double()
        if p.shape != y.shape:
            raise ShapeError(f"task {task!r}: {tuple(p.shape)} predictions for {tuple(y.shape)} labels")
        p = p.clamp(LOSS_EPSILON, 1.0 - LOSS_EPSILON)
        component = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()
        components[task] = component
        term = weights.get(task, 0.0) * component
        total = term if total is None else total + term
    return LossBreakdown(total, components)


def make_optimizer(parameters, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        parameters, lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.eps
    )


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    task_losses: dict[str, float]
    eval_auc: dict[str, Optional[float]]
    mean_auc: Optional[float]
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    model: MultiTaskNetwork
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None

    @property
    def best_auc(self) -> Optional[float]:
        for record in self.history:
            if record.epoch == self.best_epoch:
                return record.mean_auc
        return None


def use_determinism(enabled: bool) -> None:
    """Single-threaded execution with deterministic kernels."""
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _eval_aucs(model: MultiTaskNetwork, dataset: TabularDataset, batch_size: int) -> dict[str, Optional[float]]:
    scores = predict(model, dataset, batch_size)
    result: dict[str, Optional[float]] = {}
    for k, task in enumerate(model.schema.tasks):
        try:
            result[task] = auc(scores[:, k], dataset.labels[:, k])
        except MetricError:
            result[task] = None
    return result


def train(
    model: MultiTaskNetwork,
    train_data: TabularDataset,
    eval_data: TabularDataset,
    config: TrainConfig = TrainConfig(),
    history_path: Optional[str | Path] = None,
) -> TrainResult:
    """
    Train in place and return the model restored to its best epoch by mean eval AUC.

    A non-finite loss or activation aborts with TrainingDiverged, carrying the model
    restored to the best state seen so far (the initial state before the first epoch ends).
    """
    if train_data.schema.feature_names != model.schema.feature_names or train_data.schema.tasks != model.schema.tasks:
        raise ShapeError("training data does not follow the model's schema")
    use_determinism(config.deterministic)
    weights = config.weights_for(model.schema.tasks)
    optimizer = make_optimizer(model.parameters(), config)
    history: list[EpochRecord] = []
    best_state = copy.deepcopy(model.state_dict())
    best_epoch, best_auc, stale = None, -math.inf, 0
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        Path(history_path).write_text("")

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        model.train()
        total, task_totals, seen = 0.0, {t: 0.0 for t in model.schema.tasks}, 0
        batches = batch_iterator(train_data, config.batch_size, shuffle=config.shuffle, seed=config.seed + epoch)
        for batch in batches:
            optimizer.zero_grad()
            try:
                breakdown = compute_loss(model(batch).predictions, batch.labels, weights)
                if not bool(torch.isfinite(breakdown.total)):
                    raise NumericalError("non-finite loss", layer="loss")
            except NumericalError as e:
                model.load_state_dict(best_state)
                LOGGER.bind(epoch=epoch).error(f"Training diverged: {e}")
                raise TrainingDiverged(str(e), model, history) from e
            breakdown.total.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            n = len(batch)
            seen += n
            total += float(breakdown.total) * n
            for task, component in breakdown.components.items():
                task_totals[task] += float(component) * n

        aucs = _eval_aucs(model, eval_data, max(config.batch_size, 4096))
        defined = [v for v in aucs.values() if v is not None]
        mean_auc = sum(defined) / len(defined) if defined else None
        record = EpochRecord(
            epoch=epoch,
            loss=total / max(seen, 1),
            task_losses={t: v / max(seen, 1) for t, v in task_totals.items()},
            eval_auc=aucs,
            mean_auc=mean_auc,
            seconds=time.perf_counter() - started,
        )
        history.append(record)
        LOGGER.bind(epoch=epoch, loss=round(record.loss, 6), auc=aucs).info("Epoch finished")
        if history_path is not None:
            with open(history_path, "a") as out:
                out.write(record.to_json() + "\n")

        score = mean_auc if mean_auc is not None else -math.inf
        if best_epoch is None or score > best_auc:
            best_epoch, best_auc, stale = epoch, score, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                LOGGER.bind(epoch=epoch, best_epoch=best_epoch).info("Early stopping")
                break

    model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch)
