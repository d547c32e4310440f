"""
Comparison tables across runs: AUC, LogLoss and RelaImpr of every model against a named
baseline, as CSV and as a markdown table.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import pandas as pd

from .effect import Step
from .errors import ReportError
from .metrics import METRIC_COLUMNS, format_relaimpr, read_metrics, rela_impr, write_metrics
from .provenance import read_manifest
from .runtime import LOGGER
from .sweeps import partition

COMPARISON_CSV = "comparison.csv"
COMPARISON_MD = "comparison.md"
METRICS_NAME = "metrics.csv"


def _load_run(directory: Path) -> Step[Exception, tuple[str, str, pd.DataFrame]]:
    def load():
        manifest = read_manifest(directory)
        table = read_metrics(directory / METRICS_NAME)
        return manifest.name, manifest.dataset_fingerprint, table

    return Step.attempt(load)


def compare_runs(run_dirs: Sequence[str | Path], baseline_name: str) -> pd.DataFrame:
    """
    One row per (model, task) over all runs, with RelaImpr against `baseline_name`.
    Runs must share a dataset fingerprint.
    """
    failures, runs = partition([Path(d) for d in run_dirs], _load_run).run()
    if failures:
        raise ReportError("; ".join(str(e) for e in failures))
    if not runs:
        raise ReportError("no runs to compare")

    fingerprints = {name: fingerprint for name, fingerprint, _ in runs}
    if len(set(fingerprints.values())) > 1:
        raise ReportError(f"runs were trained on different datasets: {fingerprints}")
    tables = {name: table for name, _, table in runs}
    if baseline_name not in tables:
        raise ReportError(f"baseline run {baseline_name!r} is not among {sorted(tables)}")

    baseline = dict(zip(tables[baseline_name]["task"], tables[baseline_name]["auc"]))
    rows = []
    for name, _, table in runs:
        for record in table.itertuples(index=False):
            if record.task not in baseline:
                raise ReportError(f"baseline has no task {record.task!r}")
            rows.append(
                {
                    "model": record.model,
                    "task": record.task,
                    "auc": record.auc,
                    "logloss": record.logloss,
                    "relaimpr_pct": rela_impr(record.auc, baseline[record.task]),
                }
            )
    LOGGER.bind(runs=len(runs), baseline=baseline_name).info("Compared runs")
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def comparison_markdown(table: pd.DataFrame) -> str:
    """Models as rows; AUC, LogLoss and RelaImpr column groups per task."""
    tasks = list(dict.fromkeys(table["task"]))
    header = ["Model"]
    for task in tasks:
        header += [f"{task} AUC", f"{task} LogLoss", f"{task} RelaImpr"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for model in dict.fromkeys(table["model"]):
        cells = [str(model)]
        for task in tasks:
            row = table[(table["model"] == model) & (table["task"] == task)]
            if row.empty:
                cells += ["", "", ""]
                continue
            record = row.iloc[0]
            cells += [
                f"{record['auc']:.4f}",
                f"{record['logloss']:.4f}",
                format_relaimpr(record["relaimpr_pct"], suffix="%"),
            ]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_comparison(table: pd.DataFrame, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_metrics(table, directory / COMPARISON_CSV)
    (directory / COMPARISON_MD).write_text(comparison_markdown(table))
