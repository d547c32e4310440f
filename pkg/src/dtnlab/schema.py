from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Any, Literal, Mapping, Optional

from .errors import SchemaError

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"
DEFAULT_EMBEDDING_DIM = 16
OOV_ID = 0

FeatureKind = Literal["categorical", "continuous"]


@dataclass(frozen=True)
class FeatureSpec:
    """
    One predictor column.

    Categorical features carry `vocab_size` including the reserved out-of-vocabulary id 0,
    and optionally the ordered `vocabulary` whose i-th entry has id i + 1. Continuous
    features carry the train-split `mean`/`std` used to standardize them.
    """

    name: str
    kind: FeatureKind
    vocab_size: Optional[int] = None
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    vocabulary: Optional[tuple[str, ...]] = None
    mean: Optional[float] = None
    std: Optional[float] = None

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, CONTINUOUS):
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.embedding_dim < 1:
            raise SchemaError(f"feature {self.name!r}: embedding_dim must be positive")
        if self.kind == CATEGORICAL:
            if self.vocab_size is None or self.vocab_size < 1:
                raise SchemaError(f"feature {self.name!r}: categorical needs vocab_size >= 1")
            if self.vocabulary is not None and len(self.vocabulary) + 1 != self.vocab_size:
                raise SchemaError(
                    f"feature {self.name!r}: vocabulary of {len(self.vocabulary)} values "
                    f"does not match vocab_size {self.vocab_size}"
                )

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL


@dataclass(frozen=True)
class FeatureSchema:
    """
    Ordered predictors, ordered binary tasks and the task dependency chain.

    `task_dependencies` maps a task to the task whose prediction precedes it (or None).
    A dependency must point to an earlier task in `tasks`, so the task order is always a
    valid evaluation order.
    """

    features: tuple[FeatureSpec, ...]
    tasks: tuple[str, ...]
    task_dependencies: Mapping[str, Optional[str]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        deps = {task: self.task_dependencies.get(task) for task in self.tasks}
        unknown = set(self.task_dependencies) - set(self.tasks)
        if unknown:
            raise SchemaError(f"dependencies declared for unknown tasks {sorted(unknown)}")
        object.__setattr__(self, "task_dependencies", deps)

        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        if not self.tasks:
            raise SchemaError("at least one task is required")
        if len(set(self.tasks)) != len(self.tasks):
            raise SchemaError("task names must be unique")
        for position, task in enumerate(self.tasks):
            preceding = deps[task]
            if preceding is None:
                continue
            if preceding not in self.tasks:
                raise SchemaError(f"task {task!r} depends on unknown task {preceding!r}")
            if self.tasks.index(preceding) >= position:
                raise SchemaError(
                    f"task {task!r} depends on {preceding!r}, which is not an earlier task"
                )

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def categorical(self) -> list[FeatureSpec]:
        return [f for f in self.features if f.is_categorical]

    @property
    def continuous(self) -> list[FeatureSpec]:
        return [f for f in self.features if not f.is_categorical]

    @property
    def input_dim(self) -> int:
        """Width of the concatenated embedding vector x."""
        return sum(f.embedding_dim for f in self.features)

    def feature(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise SchemaError(f"unknown feature {name!r}")

    def column(self, name: str) -> tuple[str, int]:
        """Locate a feature as ('categorical' | 'continuous', column index in that matrix)."""
        spec = self.feature(name)
        group = self.categorical if spec.is_categorical else self.continuous
        return spec.kind, [f.name for f in group].index(name)

    def task_index(self, task: str) -> int:
        if task not in self.tasks:
            raise SchemaError(f"unknown task {task!r}")
        return self.tasks.index(task)

    def with_dependencies(self, dependencies: Mapping[str, Optional[str]]) -> FeatureSchema:
        return replace(self, task_dependencies=dict(dependencies))

    def with_embedding_dim(self, embedding_dim: int) -> FeatureSchema:
        features = tuple(replace(f, embedding_dim=embedding_dim) for f in self.features)
        return replace(self, features=features)

    def to_dict(self) -> dict[str, Any]:
        features = []
        for f in self.features:
            entry = asdict(f)
            if entry["vocabulary"] is not None:
                entry["vocabulary"] = list(entry["vocabulary"])
            features.append(entry)
        return {
            "features": features,
            "tasks": list(self.tasks),
            "task_dependencies": dict(self.task_dependencies),
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> FeatureSchema:
        features = []
        for entry in data["features"]:
            entry = dict(entry)
            if entry.get("vocabulary") is not None:
                entry["vocabulary"] = tuple(entry["vocabulary"])
            features.append(FeatureSpec(**entry))
        return FeatureSchema(
            features=tuple(features),
            tasks=tuple(data["tasks"]),
            task_dependencies=dict(data.get("task_dependencies", {})),
        )
