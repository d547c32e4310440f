"""
Per-task permutation feature importance: the AUC a task loses when one feature's column is
shuffled across the test rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata, spearmanr

from .dataset import TabularDataset, permute_feature
from .errors import SchemaError
from .metrics import auc
from .models import MultiTaskNetwork, predict
from .runtime import LOGGER

DEFAULT_REPEATS = 5


def _spearman(first: np.ndarray, second: np.ndarray, pair: tuple[str, str]) -> float:
    """Spearman rho, or NaN with a warning when either FI column is constant."""
    if len(first) < 2 or np.ptp(first) == 0 or np.ptp(second) == 0:
        LOGGER.bind(pair=f"{pair[0]}/{pair[1]}").warning(
            "FI rank correlation is undefined because one task's FI is constant; reporting NaN"
        )
        return float("nan")
    return float(spearmanr(first, second).statistic)


def _task_aucs(scores: np.ndarray, dataset: TabularDataset, columns: Sequence[int]) -> np.ndarray:
    return np.array([auc(scores[:, k], dataset.labels[:, k]) for k in columns])


def _importance_matrix(
    model: MultiTaskNetwork,
    test_data: TabularDataset,
    features: Sequence[str],
    tasks: Sequence[str],
    repeats: int,
    seed: int,
    batch_size: int,
) -> tuple[np.ndarray, dict[str, float]]:
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for name in features:
        test_data.schema.feature(name)
    columns = [test_data.schema.task_index(t) for t in tasks]
    base = _task_aucs(predict(model, test_data, batch_size), test_data, columns)

    values = np.zeros((len(features), len(tasks)))
    for i, name in enumerate(features):
        drops = np.zeros((repeats, len(tasks)))
        for r in range(repeats):
            permuted = permute_feature(test_data, name, seed + r)
            drops[r] = base - _task_aucs(predict(model, permuted, batch_size), permuted, columns)
        values[i] = drops.mean(axis=0)
        LOGGER.bind(feature=name).debug(f"FI {dict(zip(tasks, values[i].round(6)))}")
    return values, dict(zip(tasks, base.tolist()))


def permutation_feature_importance(
    model: MultiTaskNetwork,
    test_data: TabularDataset,
    feature: str,
    task: str,
    repeats: int = DEFAULT_REPEATS,
    seed: int = 0,
    batch_size: int = 4096,
) -> float:
    """
    Baseline AUC minus the AUC after permuting `feature`, averaged over permutations drawn
    from seeds seed, seed + 1, ...
    """
    if task not in test_data.schema.tasks:
        raise SchemaError(f"unknown task {task!r}")
    values, _ = _importance_matrix(model, test_data, [feature], [task], repeats, seed, batch_size)
    return float(values[0, 0])


@dataclass(frozen=True)
class FIReport:
    """FI per (feature, task), descending ranks per task, and the rank correlation between tasks."""

    features: tuple[str, ...]
    tasks: tuple[str, ...]
    values: np.ndarray
    ranks: np.ndarray
    correlations: dict[tuple[str, str], float]
    repeats: int
    seed: int
    baseline_auc: dict[str, float] = field(default_factory=dict)

    def fi(self, feature: str, task: str) -> float:
        return float(self.values[self.features.index(feature), self.tasks.index(task)])

    def rank(self, feature: str, task: str) -> int:
        return int(self.ranks[self.features.index(feature), self.tasks.index(task)])

    def correlation(self, first: str, second: str, features: Optional[Sequence[str]] = None) -> float:
        """Spearman correlation of the two tasks' FI, optionally over a subset of features."""
        if features is None:
            return self.correlations[(first, second)]
        rows = [self.features.index(f) for f in features]
        a, b = self.tasks.index(first), self.tasks.index(second)
        return _spearman(self.values[rows, a], self.values[rows, b], (first, second))

    def table(self) -> pd.DataFrame:
        frame = pd.DataFrame({"feature": self.features})
        for k, task in enumerate(self.tasks):
            frame[f"FI_{task}"] = self.values[:, k]
        for k, task in enumerate(self.tasks):
            frame[f"Rank_{task}"] = self.ranks[:, k]
        return frame

    def scatter(self) -> pd.DataFrame:
        """Per feature: x = FI for the first task, y = FI for the second."""
        if len(self.tasks) < 2:
            raise SchemaError("scatter data needs two tasks")
        return pd.DataFrame({"feature": self.features, "x": self.values[:, 0], "y": self.values[:, 1]})

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.table().to_csv(directory / "fi_report.csv", index=False, float_format="%.6f")
        if len(self.tasks) >= 2:
            self.scatter().to_csv(directory / "fi_scatter.csv", index=False, float_format="%.6f")
        pd.DataFrame(
            [{"first": a, "second": b, "spearman": rho} for (a, b), rho in self.correlations.items()]
        ).to_csv(directory / "fi_correlation.csv", index=False, float_format="%.6f")


def fi_report(
    model: MultiTaskNetwork,
    test_data: TabularDataset,
    features: Optional[Sequence[str]] = None,
    tasks: Optional[Sequence[str]] = None,
    repeats: int = DEFAULT_REPEATS,
    seed: int = 0,
    batch_size: int = 4096,
) -> FIReport:
    features = tuple(features if features is not None else test_data.schema.feature_names)
    tasks = tuple(tasks if tasks is not None else test_data.schema.tasks)
    for task in tasks:
        test_data.schema.task_index(task)
    values, baseline = _importance_matrix(model, test_data, features, tasks, repeats, seed, batch_size)
    if not np.isfinite(values).all():
        raise SchemaError("feature importance produced non-finite values")
    ranks = np.stack([rankdata(-values[:, k], method="ordinal") for k in range(len(tasks))], axis=1).astype(int)
    correlations = {
        (tasks[a], tasks[b]): _spearman(values[:, a], values[:, b], (tasks[a], tasks[b]))
        for a, b in combinations(range(len(tasks)), 2)
    }
    LOGGER.bind(features=len(features), repeats=repeats).info(f"Feature importance rank correlations {correlations}")
    return FIReport(features, tasks, values, ranks, correlations, repeats, seed, baseline)
