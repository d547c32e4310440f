"""
The experiment commands behind the `dtnlab` CLI.

Each command loads and validates its config first, then describes its work as one `Step`
pipeline; `Runtime.run_app` executes it and maps failures to exit statuses.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd

from .app import ExperimentApp
from .census import load_census_income
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (EvaluationSection, ExperimentConfig, load_config,
                     write_resolved)
from .dataset import TabularDataset, dataset_fingerprint, split_rows, to_csv
from .effect import Step
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .importance import fi_report
from .inspection import (GateThreshold, KeepList, SetSelector,
                         export_representations, extract_gate_weights,
                         trim_model)
from .interactions import parameter_count
from .metrics import evaluate_model, read_metrics, write_metrics
from .models import ModelConfig, MultiTaskNetwork, build_model
from .provenance import RunManifest, git_commit, write_manifest
from .reports import compare_runs, write_comparison
from .runtime import LOGGER, Runtime
from .schema import FeatureSchema
from .sweeps import foreach
from .synthetic import (SyntheticGroundTruth, cross_fields, draw_validation,
                        generate_synthetic)
from .training import train

CHECKPOINT_NAME = "model.pt"
METRICS_NAME = "metrics.csv"
HISTORY_NAME = "history.jsonl"
TRIMMED_DIR = "trimmed"


@dataclass(frozen=True)
class DataBundle:
    """Train for fitting, valid for early stopping and checkpoint selection, test for reporting."""

    train: TabularDataset
    valid: TabularDataset
    test: TabularDataset
    schema: FeatureSchema
    truth: Optional[SyntheticGroundTruth] = None

    @property
    def splits(self) -> dict[str, TabularDataset]:
        return {"train": self.train, "valid": self.valid, "test": self.test}

    @property
    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for split in self.splits.values():
            digest.update(dataset_fingerprint(split).encode())
        return digest.hexdigest()


def load_data(config: ExperimentConfig) -> DataBundle:
    dataset = config.dataset
    if dataset.source == "census":
        train_data, test_file, schema = load_census_income(
            dataset.train_path,
            dataset.test_path,
            never_married_positive=dataset.never_married_positive,
            embedding_dim=dataset.embedding_dim,
        )
        valid_data, test_data = split_rows(test_file, dataset.validation_fraction, dataset.seed)
        return DataBundle(train_data, valid_data, test_data, schema)
    synthetic = dataset.synthetic
    train_data, test_data, schema, truth = generate_synthetic(
        synthetic.n_train, synthetic.n_test, synthetic.to_spec(dataset.embedding_dim), dataset.seed
    )
    valid_data = draw_validation(synthetic.n_valid, schema, truth, dataset.seed)
    return DataBundle(train_data, valid_data, test_data, schema, truth)


def model_config_for(config: ExperimentConfig, data: DataBundle) -> ModelConfig:
    """
    The configured architecture; on synthetic data MemoNet modules without explicit fields
    cross the categorical fields of the generating pairs.
    """
    model_config = config.model_config()
    if data.truth is None:
        return model_config
    return model_config.with_default_cross_fields(cross_fields(data.truth))


def baseline_aucs(config: ExperimentConfig) -> Optional[dict[str, float]]:
    if not config.evaluation.baseline_run:
        return None
    table = read_metrics(Path(config.evaluation.baseline_run) / METRICS_NAME)
    return dict(zip(table["task"], table["auc"]))


class ExperimentCommand(ExperimentApp[Exception]):
    """Loads the config, echoes it into the output directory, then runs `pipeline`."""

    name = "command"

    def __init__(
        self,
        config_path: str | Path,
        overrides: Sequence[str] = (),
        out: Optional[str | Path] = None,
        runtime: Optional[Runtime] = None,
    ):
        super().__init__(runtime)
        self.config_path = config_path
        self.overrides = list(overrides)
        self.out = out
        self.config: Optional[ExperimentConfig] = None
        self.out_dir: Optional[Path] = None

    def _configure(self) -> ExperimentConfig:
        self.config = load_config(self.config_path, self.overrides)
        self.out_dir = self.config.output_path(self.out)
        write_resolved(self.config, self.out_dir)
        LOGGER.bind(command=self.name, out=str(self.out_dir)).info("Resolved configuration")
        return self.config

    def run(self) -> Step[Exception, None]:
        return Step.attempt(self._configure).flat_map(lambda _: self.pipeline()).map(lambda _: None)

    def pipeline(self) -> Step:
        raise NotImplementedError

    @property
    def run_name(self) -> str:
        return self.config.model.run_name

    def data(self) -> Step[Exception, DataBundle]:
        return Step.log_span("data", "Loaded datasets", Step.attempt(lambda: load_data(self.config)))

    def checkpoint(self, directory: Optional[Path] = None) -> Step[Exception, MultiTaskNetwork]:
        path = (directory or self.out_dir) / CHECKPOINT_NAME

        def load():
            if not path.is_file():
                raise CheckpointError(f"{self.name} needs a trained checkpoint at {path}; run `train` first")
            return load_checkpoint(path)

        return Step.attempt(load)

    def manifest(self, model: MultiTaskNetwork, data: DataBundle, name: str, trimmed_from: Optional[str] = None) -> RunManifest:
        return RunManifest(
            name=name,
            kind=model.kind,
            dataset_fingerprint=data.fingerprint,
            parameters=parameter_count(model),
            seed=self.config.training.seed,
            git_commit=git_commit(Path.cwd()),
            trimmed_from=trimmed_from,
        )


class PrepareDataCommand(ExperimentCommand):
    name = "prepare-data"

    def _summary(self, data: DataBundle) -> dict:
        summary = {f"{name}_rows": len(split) for name, split in data.splits.items()}
        summary["fingerprint"] = data.fingerprint
        summary["train_positive_rate"] = dict(
            zip(data.schema.tasks, data.train.labels.mean(axis=0).round(6).tolist())
        )
        return summary

    def _write(self, data: DataBundle) -> Step[Exception, None]:
        directory = self.out_dir / "data"
        return Step.chain_all(
            Step.attempt(lambda: directory.mkdir(parents=True, exist_ok=True)),
            *(
                Step.attempt(lambda name=name, split=split: to_csv(split, directory / f"{name}.csv"))
                for name, split in data.splits.items()
            ),
            Step.attempt(
                lambda: (directory / "schema.json").write_text(json.dumps(data.schema.to_dict(), indent=2) + "\n")
            ),
            Step.attempt(
                lambda: (directory / "summary.json").write_text(
                    json.dumps(self._summary(data), indent=2, sort_keys=True) + "\n"
                )
            ),
        )

    def pipeline(self) -> Step:
        return self.data().flat_map(self._write)


class TrainCommand(ExperimentCommand):
    name = "train"

    def _fit(self, data: DataBundle) -> MultiTaskNetwork:
        model = build_model(self.config.model.kind, data.schema, model_config_for(self.config, data))
        LOGGER.bind(kind=model.kind, parameters=parameter_count(model)).info("Built model")
        result = train(model, data.train, data.valid, self.config.training, self.out_dir / HISTORY_NAME)
        LOGGER.bind(best_epoch=result.best_epoch, best_auc=result.best_auc).info("Training finished")
        return result.model

    def _keep_last_good(self, error: Exception) -> Step[Exception, MultiTaskNetwork]:
        if not isinstance(error, TrainingDiverged):
            return Step.fail(error)
        path = self.out_dir / CHECKPOINT_NAME
        return (
            Step.attempt(lambda: save_checkpoint(error.model, path))
            .then(Step.log_warning(f"Training diverged after {len(error.history)} epochs; last good model saved to {path}"))
            .then(Step.fail(error))
        )

    def _persist(self, data: DataBundle, model: MultiTaskNetwork) -> None:
        save_checkpoint(model, self.out_dir / CHECKPOINT_NAME)
        table = evaluate_model(
            model, data.test, self.run_name, baseline_aucs(self.config), self.config.evaluation.batch_size
        )
        write_metrics(table, self.out_dir / METRICS_NAME)
        write_manifest(self.manifest(model, data, self.run_name), self.out_dir)

    def pipeline(self) -> Step:
        return self.data().flat_map(
            lambda data: Step.log_span(
                "train", "Trained model", Step.attempt(lambda: self._fit(data)).recover(self._keep_last_good)
            ).tap(lambda model: self._persist(data, model))
        )


class EvaluateCommand(ExperimentCommand):
    name = "evaluate"

    def _evaluate(self, data: DataBundle, model: MultiTaskNetwork) -> pd.DataFrame:
        table = evaluate_model(
            model, data.test, self.run_name, baseline_aucs(self.config), self.config.evaluation.batch_size
        )
        write_metrics(table, self.out_dir / METRICS_NAME)
        write_manifest(self.manifest(model, data, self.run_name), self.out_dir)
        return table

    def pipeline(self) -> Step:
        return self.checkpoint().flat_map(
            lambda model: self.data().map(lambda data: self._evaluate(data, model))
        )


class FeatureImportanceCommand(ExperimentCommand):
    name = "feature-importance"

    def _report(self, data: DataBundle, model: MultiTaskNetwork) -> None:
        evaluation = self.config.evaluation
        report = fi_report(
            model,
            data.test,
            features=list(evaluation.fi_features) or None,
            repeats=evaluation.fi_repeats,
            seed=evaluation.fi_seed,
            batch_size=evaluation.batch_size,
        )
        report.write(self.out_dir / "fi")

    def pipeline(self) -> Step:
        return self.checkpoint().flat_map(
            lambda model: self.data().flat_map(
                lambda data: Step.log_span("fi", "Computed feature importance", Step.attempt(lambda: self._report(data, model)))
            )
        )


class GateWeightsCommand(ExperimentCommand):
    name = "gate-weights"

    def _extract(self, data: DataBundle, model: MultiTaskNetwork) -> None:
        report = extract_gate_weights(model, data.test, self.config.evaluation.batch_size)
        report.write(self.out_dir / "gate_weights.csv")

    def pipeline(self) -> Step:
        return self.checkpoint().flat_map(
            lambda model: self.data().tap(lambda data: self._extract(data, model))
        )


class TrimCommand(ExperimentCommand):
    name = "trim"

    def _has_rule(self) -> Step[Exception, EvaluationSection]:
        return Step.success(self.config.evaluation).ensure(
            lambda evaluation: bool(evaluation.keep) or evaluation.gate_threshold is not None,
            lambda _: ConfigError("trim needs evaluation.keep or a threshold", key_path="evaluation.gate_threshold"),
        )

    def _rule(self, data: DataBundle, model: MultiTaskNetwork):
        evaluation = self.config.evaluation
        if evaluation.keep:
            return KeepList({owner: list(indices) for owner, indices in evaluation.keep.items()})
        report = extract_gate_weights(model, data.train, evaluation.batch_size)
        return GateThreshold(evaluation.gate_threshold, report)

    def _trim(self, data: DataBundle, model: MultiTaskNetwork) -> None:
        trimmed = trim_model(model, self._rule(data, model))
        directory = self.out_dir / TRIMMED_DIR
        epochs = self.config.evaluation.trim_finetune_epochs
        if epochs > 0:
            config = replace(self.config.training, epochs=epochs)
            trimmed = train(trimmed, data.train, data.valid, config, directory / HISTORY_NAME).model
        save_checkpoint(trimmed, directory / CHECKPOINT_NAME)
        name = f"{self.run_name}-trim"
        table = evaluate_model(
            trimmed, data.test, name, baseline_aucs(self.config), self.config.evaluation.batch_size
        )
        write_metrics(table, directory / METRICS_NAME)
        write_manifest(self.manifest(trimmed, data, name, trimmed_from=self.run_name), directory)
        write_resolved(self.config, directory)

    def pipeline(self) -> Step:
        return self._has_rule().then(self.checkpoint()).flat_map(
            lambda model: self.data().flat_map(
                lambda data: Step.log_span("trim", "Trimmed model", Step.attempt(lambda: self._trim(data, model)))
            )
        )


class ExportReprCommand(ExperimentCommand):
    name = "export-repr"

    def _selectors(self) -> Step[Exception, list[SetSelector]]:
        return foreach(
            list(self.config.evaluation.export_sets),
            lambda text: Step.log_debug(f"Parsing export selector {text!r}").then(
                Step.attempt(lambda: SetSelector.parse(text))
            ),
        )

    def _export(self, data: DataBundle, model: MultiTaskNetwork, selectors: list[SetSelector]) -> None:
        evaluation = self.config.evaluation
        export = export_representations(
            model,
            data.test,
            selectors,
            sample_count=min(evaluation.export_samples, len(data.test)),
            seed=evaluation.export_seed,
            batch_size=evaluation.batch_size,
        )
        export.write(self.out_dir / "representations.csv")

    def pipeline(self) -> Step:
        return self._selectors().flat_map(
            lambda selectors: self.checkpoint().flat_map(
                lambda model: self.data().tap(lambda data: self._export(data, model, selectors))
            )
        )


class ReportCommand(ExperimentCommand):
    name = "report"

    def _report(self) -> pd.DataFrame:
        evaluation = self.config.evaluation
        if not evaluation.report_runs:
            raise ConfigError("lists no run directories", key_path="evaluation.report_runs")
        table = compare_runs(list(evaluation.report_runs), evaluation.report_baseline)
        write_comparison(table, self.out_dir)
        return table

    def pipeline(self) -> Step:
        return Step.attempt(self._report)


COMMANDS: dict[str, type[ExperimentCommand]] = {
    command.name: command
    for command in (
        PrepareDataCommand,
        TrainCommand,
        EvaluateCommand,
        FeatureImportanceCommand,
        GateWeightsCommand,
        TrimCommand,
        ExportReprCommand,
        ReportCommand,
    )
}
