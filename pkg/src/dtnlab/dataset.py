from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd
import torch

from .errors import DataFormatError, SchemaError, ShapeError
from .schema import CATEGORICAL, FeatureSchema


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    array = np.array(array, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TabularDataset:
    """
    Encoded examples held in memory: categorical ids, standardized continuous values and
    one binary label column per task. Arrays are read-only, so datasets can be shared
    between concurrent readers and derived datasets may reuse untouched columns.
    """

    schema: FeatureSchema
    categorical_ids: np.ndarray
    continuous_values: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n_cat, n_cont = len(self.schema.categorical), len(self.schema.continuous)
        n_rows = len(self.labels)
        cat = self.categorical_ids.reshape(n_rows, n_cat) if n_cat == 0 else self.categorical_ids
        cont = self.continuous_values.reshape(n_rows, n_cont) if n_cont == 0 else self.continuous_values
        object.__setattr__(self, "categorical_ids", _frozen(cat, np.int64))
        object.__setattr__(self, "continuous_values", _frozen(cont, np.float32))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int8))

        if self.categorical_ids.shape != (n_rows, n_cat):
            raise ShapeError(
                f"categorical_ids has shape {self.categorical_ids.shape}, expected {(n_rows, n_cat)}"
            )
        if self.continuous_values.shape != (n_rows, n_cont):
            raise ShapeError(
                f"continuous_values has shape {self.continuous_values.shape}, expected {(n_rows, n_cont)}"
            )
        if self.labels.shape != (n_rows, len(self.schema.tasks)):
            raise ShapeError(
                f"labels has shape {self.labels.shape}, expected {(n_rows, len(self.schema.tasks))}"
            )
        if n_rows and not np.isin(self.labels, (0, 1)).all():
            raise DataFormatError("labels must be 0 or 1")
        for column, spec in enumerate(self.schema.categorical):
            ids = self.categorical_ids[:, column]
            if n_rows and (ids.min() < 0 or ids.max() >= spec.vocab_size):
                raise DataFormatError(
                    f"feature {spec.name!r} has ids outside [0, {spec.vocab_size})"
                )

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, rows: Sequence[int] | np.ndarray) -> TabularDataset:
        rows = np.asarray(rows, dtype=np.int64)
        return TabularDataset(
            schema=self.schema,
            categorical_ids=self.categorical_ids[rows],
            continuous_values=self.continuous_values[rows],
            labels=self.labels[rows],
        )

    def column(self, name: str) -> np.ndarray:
        kind, index = self.schema.column(name)
        source = self.categorical_ids if kind == CATEGORICAL else self.continuous_values
        return source[:, index]

    def with_column(self, name: str, values: np.ndarray) -> TabularDataset:
        kind, index = self.schema.column(name)
        if kind == CATEGORICAL:
            ids = self.categorical_ids.copy()
            ids[:, index] = values
            return replace(self, categorical_ids=ids)
        cont = self.continuous_values.copy()
        cont[:, index] = values
        return replace(self, continuous_values=cont)

    def with_schema(self, schema: FeatureSchema) -> TabularDataset:
        if schema.feature_names != self.schema.feature_names or schema.tasks != self.schema.tasks:
            raise SchemaError("replacement schema must keep features and tasks")
        return replace(self, schema=schema)


@dataclass(frozen=True)
class ExampleBatch:
    """A slice of a dataset as tensors; `labels` is float for the loss."""

    categorical_ids: torch.Tensor
    continuous_values: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return self.labels.shape[0]

    @staticmethod
    def from_dataset(dataset: TabularDataset, rows: np.ndarray | slice | None = None) -> ExampleBatch:
        selector = slice(None) if rows is None else rows
        return ExampleBatch(
            categorical_ids=torch.tensor(dataset.categorical_ids[selector]),
            continuous_values=torch.tensor(dataset.continuous_values[selector]),
            labels=torch.tensor(dataset.labels[selector]).float(),
        )


def feature_permutation(n_rows: int, seed: int) -> np.ndarray:
    """The row permutation permute_feature applies for `seed`."""
    return np.random.default_rng(seed).permutation(n_rows)


def permute_feature(dataset: TabularDataset, feature_name: str, seed: int) -> TabularDataset:
    """Copy of `dataset` where only `feature_name`'s column is shuffled across rows."""
    column = dataset.column(feature_name)
    return dataset.with_column(feature_name, column[feature_permutation(len(dataset), seed)])


def split_rows(dataset: TabularDataset, fraction: float, seed: int) -> tuple[TabularDataset, TabularDataset]:
    """
    Seeded random split into (`fraction` of the rows, the rest); both parts keep the
    original row order.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(round(fraction * len(dataset)))
    return dataset.take(np.sort(order[:cut])), dataset.take(np.sort(order[cut:]))


def batch_iterator(
    dataset: TabularDataset, batch_size: int, shuffle: bool = False, seed: int = 0
) -> Iterator[ExampleBatch]:
    """
    Yield every example exactly once, in `batch_size` chunks (the last may be smaller).
    With `shuffle`, the order is a permutation drawn from `seed`.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n_rows = len(dataset)
    order = np.random.default_rng(seed).permutation(n_rows) if shuffle else None
    for start in range(0, n_rows, batch_size):
        stop = min(start + batch_size, n_rows)
        rows = order[start:stop] if order is not None else slice(start, stop)
        yield ExampleBatch.from_dataset(dataset, rows)


def to_frame(dataset: TabularDataset) -> pd.DataFrame:
    schema = dataset.schema
    columns = {}
    for spec in schema.features:
        columns[spec.name] = dataset.column(spec.name)
    for index, task in enumerate(schema.tasks):
        columns[task] = dataset.labels[:, index]
    return pd.DataFrame(columns)


def to_csv(dataset: TabularDataset, path: str | Path) -> None:
    """Write header `feature..., task...` and one encoded record per line."""
    to_frame(dataset).to_csv(path, index=False)


def read_csv(path: str | Path, schema: FeatureSchema) -> TabularDataset:
    frame = pd.read_csv(path)
    expected = schema.feature_names + list(schema.tasks)
    if list(frame.columns) != expected:
        raise DataFormatError(f"{path}: header {list(frame.columns)} does not match schema")
    return TabularDataset(
        schema=schema,
        categorical_ids=frame[[f.name for f in schema.categorical]].to_numpy(np.int64),
        continuous_values=frame[[f.name for f in schema.continuous]].to_numpy(np.float32),
        labels=frame[list(schema.tasks)].to_numpy(np.int8),
    )


def dataset_fingerprint(dataset: TabularDataset) -> str:
    """Content hash over the schema and the encoded arrays."""
    digest = hashlib.sha256()
    digest.update(json.dumps(dataset.schema.to_dict(), sort_keys=True).encode())
    for array in (dataset.categorical_ids, dataset.continuous_values, dataset.labels):
        digest.update(str(array.shape).encode())
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()
