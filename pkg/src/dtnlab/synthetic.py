"""
Synthetic multi-task data with known per-task feature relevance.

Each task's label is Bernoulli(sigmoid(logit)) where the logit is an intercept plus linear
terms over feature signals plus products over designated feature pairs. A continuous
feature's signal is its N(0, 1) value; a categorical feature's signal is a balanced ±1
effect looked up by category id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from .dataset import TabularDataset
from .errors import SchemaError
from .schema import (CATEGORICAL, CONTINUOUS, DEFAULT_EMBEDDING_DIM,
                     FeatureSchema, FeatureSpec)

# extra seed word of the validation stream
VALIDATION_STREAM = 1


@dataclass(frozen=True)
class SyntheticFeature:
    name: str
    kind: str = CONTINUOUS
    categories: int = 0
    coefficients: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SyntheticPair:
    first: str
    second: str
    coefficients: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SyntheticSpec:
    tasks: tuple[str, ...]
    features: tuple[SyntheticFeature, ...]
    pairs: tuple[SyntheticPair, ...] = ()
    intercepts: Mapping[str, float] = field(default_factory=dict)
    task_dependencies: Mapping[str, Optional[str]] = field(default_factory=dict)
    embedding_dim: int = DEFAULT_EMBEDDING_DIM


@dataclass(frozen=True)
class SyntheticGroundTruth:
    """True generating coefficients plus the derived relevance sets."""

    tasks: tuple[str, ...]
    feature_coefficients: dict[str, dict[str, float]]
    pair_coefficients: dict[str, dict[tuple[str, str], float]]
    intercepts: dict[str, float]
    category_effects: dict[str, np.ndarray]
    task_exclusive: dict[str, str]
    shared: tuple[str, ...]
    irrelevant: tuple[str, ...]

    def relevant_features(self, task: str) -> list[str]:
        relevant = {f for f, c in self.feature_coefficients[task].items() if c != 0.0}
        for (first, second), c in self.pair_coefficients[task].items():
            if c != 0.0:
                relevant.update((first, second))
        return sorted(relevant)

    def relevant_pairs(self, task: str) -> list[tuple[str, str]]:
        return [pair for pair, c in self.pair_coefficients[task].items() if c != 0.0]

    def exclusive_to(self, task: str) -> list[str]:
        return sorted(f for f, owner in self.task_exclusive.items() if owner == task)

    def signal(self, dataset: TabularDataset, feature: str) -> np.ndarray:
        values = dataset.column(feature)
        if feature in self.category_effects:
            return self.category_effects[feature][values]
        return values.astype(np.float64)

    def logits(self, dataset: TabularDataset, drop: Sequence[str] = ()) -> np.ndarray:
        """True logits [n, tasks]; features in `drop` contribute a zero signal."""
        signals = {
            name: (np.zeros(len(dataset)) if name in drop else self.signal(dataset, name))
            for name in dataset.schema.feature_names
        }
        out = np.zeros((len(dataset), len(self.tasks)))
        for k, task in enumerate(self.tasks):
            out[:, k] = self.intercepts[task]
            for name, c in self.feature_coefficients[task].items():
                out[:, k] += c * signals[name]
            for (first, second), c in self.pair_coefficients[task].items():
                out[:, k] += c * signals[first] * signals[second]
        return out

    def probabilities(self, dataset: TabularDataset, drop: Sequence[str] = ()) -> np.ndarray:
        return expit(self.logits(dataset, drop))


def _relevance(spec: SyntheticSpec) -> dict[str, set[str]]:
    relevance = {f.name: set() for f in spec.features}
    for f in spec.features:
        relevance[f.name].update(t for t, c in f.coefficients.items() if c != 0.0)
    for pair in spec.pairs:
        for task, c in pair.coefficients.items():
            if c != 0.0:
                relevance[pair.first].add(task)
                relevance[pair.second].add(task)
    return relevance


def validate_spec(spec: SyntheticSpec) -> dict[str, set[str]]:
    if len(spec.tasks) < 2:
        raise SchemaError("synthetic spec needs at least 2 tasks")
    names = {f.name for f in spec.features}
    for f in spec.features:
        if f.kind == CATEGORICAL and f.categories < 2:
            raise SchemaError(f"synthetic feature {f.name!r}: categorical needs >= 2 categories")
        unknown = set(f.coefficients) - set(spec.tasks)
        if unknown:
            raise SchemaError(f"synthetic feature {f.name!r}: unknown tasks {sorted(unknown)}")
    for pair in spec.pairs:
        if pair.first not in names or pair.second not in names or pair.first == pair.second:
            raise SchemaError(f"synthetic pair ({pair.first}, {pair.second}) is not a feature pair")

    relevance = _relevance(spec)
    if not any(not tasks for tasks in relevance.values()):
        raise SchemaError("synthetic spec needs at least one irrelevant feature")
    if not any(len(tasks) >= 2 for tasks in relevance.values()):
        raise SchemaError("synthetic spec needs at least one shared feature")
    for task in spec.tasks:
        if not any(tasks == {task} for tasks in relevance.values()):
            raise SchemaError(f"synthetic spec needs a feature exclusive to task {task!r}")
        if not any(p.coefficients.get(task, 0.0) != 0.0 for p in spec.pairs):
            raise SchemaError(f"synthetic spec needs a label-relevant pair for task {task!r}")
    return relevance


def _schema(spec: SyntheticSpec) -> FeatureSchema:
    features = []
    for f in spec.features:
        if f.kind == CATEGORICAL:
            features.append(
                FeatureSpec(
                    f.name, CATEGORICAL, vocab_size=f.categories + 1, embedding_dim=spec.embedding_dim
                )
            )
        else:
            features.append(
                FeatureSpec(f.name, CONTINUOUS, embedding_dim=spec.embedding_dim, mean=0.0, std=1.0)
            )
    return FeatureSchema(
        features=tuple(features), tasks=spec.tasks, task_dependencies=dict(spec.task_dependencies)
    )


def _draw(
    rng: np.random.Generator, n_rows: int, schema: FeatureSchema, truth: SyntheticGroundTruth
) -> TabularDataset:
    categorical = np.stack(
        [rng.integers(1, f.vocab_size, size=n_rows) for f in schema.categorical], axis=1
    ) if schema.categorical else np.zeros((n_rows, 0), dtype=np.int64)
    continuous = np.stack(
        [rng.standard_normal(n_rows) for _ in schema.continuous], axis=1
    ) if schema.continuous else np.zeros((n_rows, 0))
    unlabeled = TabularDataset(
        schema=schema,
        categorical_ids=categorical,
        continuous_values=continuous,
        labels=np.zeros((n_rows, len(schema.tasks)), dtype=np.int8),
    )
    probabilities = truth.probabilities(unlabeled)
    labels = (rng.random(probabilities.shape) < probabilities).astype(np.int8)
    return TabularDataset(
        schema=schema,
        categorical_ids=unlabeled.categorical_ids,
        continuous_values=unlabeled.continuous_values,
        labels=labels,
    )


def generate_synthetic(
    n_train: int, n_test: int, spec: SyntheticSpec, seed: int
) -> tuple[TabularDataset, TabularDataset, FeatureSchema, SyntheticGroundTruth]:
    """Draw train and test splits from one seeded stream; identical inputs give identical data."""
    relevance = validate_spec(spec)
    schema = _schema(spec)
    rng = np.random.default_rng(seed)

    effects = {}
    for f in spec.features:
        if f.kind == CATEGORICAL:
            # index 0 is the out-of-vocabulary slot and never drawn
            balanced = rng.permutation(np.resize([-1.0, 1.0], f.categories))
            effects[f.name] = np.concatenate([[0.0], balanced])

    truth = SyntheticGroundTruth(
        tasks=spec.tasks,
        feature_coefficients={
            t: {f.name: float(f.coefficients.get(t, 0.0)) for f in spec.features} for t in spec.tasks
        },
        pair_coefficients={
            t: {(p.first, p.second): float(p.coefficients.get(t, 0.0)) for p in spec.pairs}
            for t in spec.tasks
        },
        intercepts={t: float(spec.intercepts.get(t, 0.0)) for t in spec.tasks},
        category_effects=effects,
        task_exclusive={name: next(iter(ts)) for name, ts in relevance.items() if len(ts) == 1},
        shared=tuple(sorted(name for name, ts in relevance.items() if len(ts) >= 2)),
        irrelevant=tuple(sorted(name for name, ts in relevance.items() if not ts)),
    )
    train = _draw(rng, n_train, schema, truth)
    test = _draw(rng, n_test, schema, truth)
    return train, test, schema, truth


def draw_validation(
    n_rows: int, schema: FeatureSchema, truth: SyntheticGroundTruth, seed: int
) -> TabularDataset:
    """
    A third split from the same generating process, drawn from its own stream so train and
    test stay identical to what `generate_synthetic` returns for `seed`.
    """
    if n_rows < 1:
        raise SchemaError("validation split needs at least one row")
    return _draw(np.random.default_rng([seed, VALIDATION_STREAM]), n_rows, schema, truth)


def default_synthetic_spec(
    tasks: tuple[str, str] = ("ctr", "cvr"), embedding_dim: int = 8
) -> SyntheticSpec:
    """
    Two tasks with disjoint exclusive signals, one weaker shared signal, one interacting
    categorical pair per task and two irrelevant columns. The second task depends on the
    first.
    """
    first, second = tasks
    return SyntheticSpec(
        tasks=tasks,
        features=(
            SyntheticFeature(f"{first}_signal_a", coefficients={first: 2.0}),
            SyntheticFeature(f"{first}_signal_b", coefficients={first: 1.5}),
            SyntheticFeature(f"{second}_signal_a", coefficients={second: 2.0}),
            SyntheticFeature(f"{second}_signal_b", coefficients={second: 1.5}),
            SyntheticFeature("shared_signal", coefficients={first: 0.6, second: 0.6}),
            SyntheticFeature(f"{first}_cross_a", CATEGORICAL, categories=4),
            SyntheticFeature(f"{first}_cross_b", CATEGORICAL, categories=4),
            SyntheticFeature(f"{second}_cross_a", CATEGORICAL, categories=4),
            SyntheticFeature(f"{second}_cross_b", CATEGORICAL, categories=4),
            SyntheticFeature("noise_continuous"),
            SyntheticFeature("noise_categorical", CATEGORICAL, categories=6),
        ),
        pairs=(
            SyntheticPair(f"{first}_cross_a", f"{first}_cross_b", {first: 1.5}),
            SyntheticPair(f"{second}_cross_a", f"{second}_cross_b", {second: 1.5}),
        ),
        intercepts={first: 0.0, second: -0.5},
        task_dependencies={second: first},
        embedding_dim=embedding_dim,
    )


def cross_fields(truth: SyntheticGroundTruth) -> list[str]:
    """Categorical fields taking part in any generating pair, for MemoNet field selection."""
    fields = set()
    for task in truth.tasks:
        for pair in truth.relevant_pairs(task):
            fields.update(pair)
    return sorted(f for f in fields if f in truth.category_effects)


def duplicate_task_labels(dataset: TabularDataset, source: str, target: str) -> TabularDataset:
    """Control dataset whose `target` labels are an exact copy of the `source` labels."""
    schema = dataset.schema
    labels = dataset.labels.copy()
    labels[:, schema.task_index(target)] = labels[:, schema.task_index(source)]
    return TabularDataset(
        schema=schema,
        categorical_ids=dataset.categorical_ids,
        continuous_values=dataset.continuous_values,
        labels=labels,
    )
