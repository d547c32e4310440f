"""
AUC, LogLoss and RelaImpr, plus the per-(model, task) metrics table written by runs.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.metrics import log_loss

from .dataset import TabularDataset
from .errors import MetricError, ReportError
from .models import MultiTaskNetwork, predict

LOGLOSS_EPSILON = 1e-7
METRIC_COLUMNS = ["model", "task", "auc", "logloss", "relaimpr_pct"]


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"{len(scores)} scores for {len(labels)} labels")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    return scores, labels.astype(np.int8)


def auc(scores, labels) -> float:
    """
    Area under the ROC curve as the Mann-Whitney statistic: the chance a random positive
    scores above a random negative, ties counting one half (average ranks).
    """
    scores, labels = _binary(scores, labels)
    positives = int(labels.sum())
    negatives = len(labels) - positives
    if positives == 0 or negatives == 0:
        raise MetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - positives * (positives + 1) / 2.0
    return float(u / (positives * negatives))


def logloss(scores, labels) -> float:
    """Mean binary cross-entropy with scores clipped to [1e-7, 1 - 1e-7]."""
    scores, labels = _binary(scores, labels)
    if len(scores) == 0:
        raise MetricError("LogLoss of an empty sample")
    clipped = np.clip(scores, LOGLOSS_EPSILON, 1.0 - LOGLOSS_EPSILON)
    return float(log_loss(labels, clipped, labels=[0, 1]))


def rela_impr(auc_model: float, auc_base: float) -> float:
    """Relative AUC improvement in percent, after removing the 0.5 a random guess gets."""
    if auc_base <= 0.5:
        raise MetricError(f"RelaImpr is undefined for a baseline AUC of {auc_base}")
    return ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


def evaluate_model(
    model: MultiTaskNetwork,
    dataset: TabularDataset,
    name: str,
    baseline_aucs: Optional[Mapping[str, float]] = None,
    batch_size: int = 4096,
) -> pd.DataFrame:
    """One row per task with AUC, LogLoss and, given baseline AUCs, RelaImpr."""
    scores = predict(model, dataset, batch_size)
    rows = []
    for k, task in enumerate(model.schema.tasks):
        task_auc = auc(scores[:, k], dataset.labels[:, k])
        impr = None
        if baseline_aucs is not None and task in baseline_aucs:
            impr = rela_impr(task_auc, baseline_aucs[task])
        rows.append(
            {
                "model": name,
                "task": task,
                "auc": task_auc,
                "logloss": logloss(scores[:, k], dataset.labels[:, k]),
                "relaimpr_pct": impr,
            }
        )
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def format_relaimpr(value: Optional[float], suffix: str = "") -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    # turns -0.00 into +0.00
    rounded = round(value, 2)
    return f"{rounded + 0.0:+.2f}{suffix}"


def format_metrics(table: pd.DataFrame) -> pd.DataFrame:
    """AUC and LogLoss at 4 decimals, RelaImpr as a signed percentage at 2 decimals."""
    missing = [c for c in METRIC_COLUMNS if c not in table.columns]
    if missing:
        raise ReportError(f"metrics table lacks columns {missing}")
    return pd.DataFrame(
        {
            "model": table["model"].astype(str),
            "task": table["task"].astype(str),
            "auc": table["auc"].map(lambda v: f"{v:.4f}"),
            "logloss": table["logloss"].map(lambda v: f"{v:.4f}"),
            "relaimpr_pct": table["relaimpr_pct"].map(format_relaimpr),
        }
    )


def write_metrics(table: pd.DataFrame, path: str | Path) -> None:
    format_metrics(table).to_csv(path, index=False)


def read_metrics(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise ReportError(f"metrics file {path} not found")
    table = pd.read_csv(path, dtype={"model": str, "task": str})
    if list(table.columns) != METRIC_COLUMNS:
        raise ReportError(f"{path}: header {list(table.columns)} is not {METRIC_COLUMNS}")
    table["relaimpr_pct"] = pd.to_numeric(table["relaimpr_pct"], errors="coerce")
    return table
