"""
Multi-task networks: Shared-Bottom, MMoE, PLE (CGC), SFM, TFI and DTN.

All six are one `MultiTaskNetwork` with different wiring. Experts and interaction modules
live in sets keyed by owner (SHARED or a task name); each task owns zero, one or two gates
whose candidates point into those sets; the gated outputs are concatenated into the task's
tower. DTN gives every task a gate over its own set and a second gate over the shared set,
preceded by the set of its preceding task scaled by that task's prediction (TSN).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .dataset import ExampleBatch, TabularDataset, batch_iterator
from .errors import BuildError, NumericalError, SchemaError
from .gating import SHARED, CandidateRef, GatingNetwork
from .interactions import (GDCN, MASKNET, MEMONET, MLP, FIMSpec,
                           InteractionModule, ModelInput, build_fim,
                           mlp_layers, he_uniform_, parameter_count,
                           resolve_cross_fields,
                           solve_for_budget, with_capacity)
from .runtime import LOGGER
from .schema import FeatureSchema

SHARED_BOTTOM = "shared_bottom"
MMOE = "mmoe"
PLE = "ple"
SFM = "sfm"
TFI = "tfi"
DTN = "dtn"
ARCHITECTURES = (SHARED_BOTTOM, MMOE, PLE, SFM, TFI, DTN)
GATED_SET_ARCHITECTURES = (PLE, TFI, DTN)

DEFAULT_MFI = (FIMSpec(GDCN), FIMSpec(MEMONET), FIMSpec(MASKNET), FIMSpec(MASKNET))
EMBEDDING_INIT_STD = 0.01


@dataclass(frozen=True)
class TSNConfig:
    enabled: bool = True
    detach: bool = False


@dataclass(frozen=True)
class TaskSpec:
    name: str
    preceding_task: Optional[str]
    tower_hidden: tuple[int, ...]


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture hyperparameters. `mfi_sets`, when given, fixes the exact composition of
    every set (owner -> module specs) and takes precedence over the expert counts and the
    `shared_fims` / `task_fims` templates; built models always carry it resolved.
    """

    output_dim: int = 512
    tower_hidden: tuple[int, ...] = (256, 128)
    tower_overrides: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    expert_hidden: Optional[tuple[int, ...]] = None
    num_experts: int = 4
    shared_experts: int = 2
    specific_experts: int = 2
    interaction: FIMSpec = FIMSpec(MASKNET)
    shared_fims: tuple[FIMSpec, ...] = DEFAULT_MFI
    task_fims: tuple[FIMSpec, ...] = DEFAULT_MFI
    task_dependencies: Optional[Mapping[str, Optional[str]]] = None
    tsn: Mapping[str, TSNConfig] = field(default_factory=dict)
    parameter_budget: Optional[int] = None
    mfi_sets: Optional[Mapping[str, tuple[FIMSpec, ...]]] = None
    seed: int = 0
    check_finite: bool = True

    def tsn_for(self, task: str) -> TSNConfig:
        return self.tsn.get(task, TSNConfig())

    def with_default_cross_fields(self, fields: Sequence[str]) -> ModelConfig:
        """Copy where every MemoNet spec without `cross_fields` crosses `fields` instead."""
        fields = tuple(fields)

        def fill(spec: FIMSpec) -> FIMSpec:
            if spec.kind == MEMONET and spec.cross_fields is None:
                return replace(spec, cross_fields=fields)
            return spec

        return replace(
            self,
            interaction=fill(self.interaction),
            shared_fims=tuple(fill(s) for s in self.shared_fims),
            task_fims=tuple(fill(s) for s in self.task_fims),
            mfi_sets=None if self.mfi_sets is None else {
                owner: tuple(fill(s) for s in specs) for owner, specs in self.mfi_sets.items()
            },
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "output_dim": self.output_dim,
            "tower_hidden": list(self.tower_hidden),
            "tower_overrides": {t: list(w) for t, w in self.tower_overrides.items()},
            "expert_hidden": None if self.expert_hidden is None else list(self.expert_hidden),
            "num_experts": self.num_experts,
            "shared_experts": self.shared_experts,
            "specific_experts": self.specific_experts,
            "interaction": self.interaction.to_dict(),
            "shared_fims": [s.to_dict() for s in self.shared_fims],
            "task_fims": [s.to_dict() for s in self.task_fims],
            "task_dependencies": None if self.task_dependencies is None else dict(self.task_dependencies),
            "tsn": {t: {"enabled": c.enabled, "detach": c.detach} for t, c in self.tsn.items()},
            "parameter_budget": self.parameter_budget,
            "mfi_sets": None if self.mfi_sets is None else {
                owner: [s.to_dict() for s in specs] for owner, specs in self.mfi_sets.items()
            },
            "seed": self.seed,
            "check_finite": self.check_finite,
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> ModelConfig:
        data = dict(data)
        specs = lambda items: tuple(FIMSpec.from_dict(s) for s in items)
        if data.get("expert_hidden") is not None:
            data["expert_hidden"] = tuple(data["expert_hidden"])
        if "tower_hidden" in data:
            data["tower_hidden"] = tuple(data["tower_hidden"])
        if "tower_overrides" in data:
            data["tower_overrides"] = {t: tuple(w) for t, w in data["tower_overrides"].items()}
        if "interaction" in data:
            data["interaction"] = FIMSpec.from_dict(data["interaction"])
        for key in ("shared_fims", "task_fims"):
            if key in data:
                data[key] = specs(data[key])
        if "tsn" in data:
            data["tsn"] = {t: TSNConfig(**c) for t, c in data["tsn"].items()}
        if data.get("mfi_sets") is not None:
            data["mfi_sets"] = {owner: specs(items) for owner, items in data["mfi_sets"].items()}
        return ModelConfig(**data)


@dataclass
class ForwardOutput:
    predictions: dict[str, torch.Tensor]
    gate_weights: dict[str, torch.Tensor]
    gated: dict[str, torch.Tensor]
    fim_outputs: dict[str, list[torch.Tensor]]


class FeatureEmbedding(nn.Module):
    """
    Input layer: one table per categorical feature, one learned vector per continuous
    feature scaled by its value; outputs are concatenated in schema order into x.
    """

    def __init__(self, schema: FeatureSchema):
        super().__init__()
        self.schema = schema
        self.tables = nn.ModuleDict(
            {f.name: nn.Embedding(f.vocab_size, f.embedding_dim) for f in schema.categorical}
        )
        self.vectors = nn.ParameterDict(
            {f.name: nn.Parameter(torch.empty(f.embedding_dim)) for f in schema.continuous}
        )
        for table in self.tables.values():
            nn.init.normal_(table.weight, mean=0.0, std=EMBEDDING_INIT_STD)
        for vector in self.vectors.values():
            nn.init.normal_(vector, mean=0.0, std=EMBEDDING_INIT_STD)
        self._slots = [
            (f.name, f.is_categorical, self.schema.column(f.name)[1]) for f in schema.features
        ]

    def feature_parameters(self, name: str) -> torch.Tensor:
        if name in self.tables:
            return self.tables[name].weight
        if name in self.vectors:
            return self.vectors[name]
        raise SchemaError(f"unknown feature {name!r}")

    def forward(self, categorical_ids: torch.Tensor, continuous_values: torch.Tensor) -> torch.Tensor:
        parts = []
        for name, is_categorical, column in self._slots:
            if is_categorical:
                parts.append(self.tables[name](categorical_ids[:, column]))
            else:
                vector = self.vectors[name]
                parts.append(continuous_values[:, column : column + 1].to(vector.dtype) * vector)
        return torch.cat(parts, dim=-1)


class MFISet(nn.Module):
    """The modules owned by one task (or SHARED), all with the same output width."""

    def __init__(self, owner: str, modules: Sequence[InteractionModule]):
        super().__init__()
        self.owner = owner
        self.fims = nn.ModuleList(modules)

    @property
    def kinds(self) -> list[str]:
        return [m.kind for m in self.fims]

    @property
    def specs(self) -> tuple[FIMSpec, ...]:
        return tuple(m.spec for m in self.fims)

    def forward(self, inputs: ModelInput) -> list[torch.Tensor]:
        return [m(inputs) for m in self.fims]


class Tower(nn.Module):
    def __init__(self, input_dim: int, hidden: tuple[int, ...]):
        super().__init__()
        self.input_dim = input_dim
        self.net = mlp_layers(input_dim, hidden, 1)
        for module in self.net:
            if isinstance(module, nn.Linear):
                he_uniform_(module)

    def forward(self, representation: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(representation)).squeeze(-1)


class MultiTaskNetwork(nn.Module):
    def __init__(
        self,
        kind: str,
        schema: FeatureSchema,
        config: ModelConfig,
        sets: Mapping[str, Sequence[InteractionModule]],
        task_gates: Mapping[str, Sequence[tuple[str, Sequence[CandidateRef]]]],
        interaction: Optional[InteractionModule] = None,
    ):
        super().__init__()
        self.kind = kind
        self.schema = schema
        self.config = config
        self.embedding = FeatureEmbedding(schema)
        self.interaction = interaction
        self.sets = nn.ModuleDict({owner: MFISet(owner, modules) for owner, modules in sets.items()})
        selector_dim = interaction.output_dim if interaction is not None else schema.input_dim

        self.gates = nn.ModuleDict()
        self.task_gates: dict[str, list[str]] = {}
        for task in schema.tasks:
            self.task_gates[task] = []
            for key, candidates in task_gates.get(task, []):
                self.gates[key] = GatingNetwork(task, selector_dim, candidates)
                self.task_gates[task].append(key)

        self.tasks = [
            TaskSpec(t, schema.task_dependencies[t], tuple(config.tower_overrides.get(t, config.tower_hidden)))
            for t in schema.tasks
        ]
        self.towers = nn.ModuleDict(
            {
                spec.name: Tower(self._tower_width(spec.name), spec.tower_hidden)
                for spec in self.tasks
            }
        )

    def _tower_width(self, task: str) -> int:
        gates = self.task_gates[task]
        return self.config.output_dim * max(1, len(gates))

    def _check(self, layer: str, value: torch.Tensor) -> torch.Tensor:
        if self.config.check_finite and not bool(torch.isfinite(value).all()):
            raise NumericalError("non-finite values", layer=layer)
        return value

    def forward(
        self,
        batch: ExampleBatch,
        tsn_overrides: Optional[Mapping[str, float]] = None,
    ) -> ForwardOutput:
        """
        Evaluate every task in dependency order.

        `tsn_overrides` replaces the multiplier a preceding task contributes to its
        dependents' task-sensitive candidates; the preceding task's own prediction is left
        untouched.
        """
        ids = batch.categorical_ids
        x = self._check("embedding", self.embedding(ids, batch.continuous_values))
        inputs = ModelInput(x, ids)
        if self.interaction is not None:
            z = self._check(f"interaction:{self.interaction.kind}", self.interaction(inputs))
            inputs = ModelInput(z, ids)
        selector = inputs.x

        fim_outputs = {}
        for owner, mfi in self.sets.items():
            fim_outputs[owner] = [
                self._check(f"{owner}[{i}]:{kind}", out)
                for i, (kind, out) in enumerate(zip(mfi.kinds, mfi(inputs)))
            ]

        predictions: dict[str, torch.Tensor] = {}
        gate_weights: dict[str, torch.Tensor] = {}
        gated: dict[str, torch.Tensor] = {}
        for spec in self.tasks:
            keys = self.task_gates[spec.name]
            if not keys:
                representation = fim_outputs[SHARED][0]
            else:
                parts = []
                for key in keys:
                    gate = self.gates[key]
                    candidates = [
                        self._candidate(spec.name, ref, fim_outputs, predictions, tsn_overrides)
                        for ref in gate.candidates
                    ]
                    weights, summed = gate(selector, candidates)
                    gate_weights[key] = weights
                    gated[key] = self._check(f"gate:{key}", summed)
                    parts.append(summed)
                representation = torch.cat(parts, dim=-1)
            predictions[spec.name] = self._check(f"tower:{spec.name}", self.towers[spec.name](representation))
        return ForwardOutput(predictions, gate_weights, gated, fim_outputs)

    def _candidate(
        self,
        task: str,
        ref: CandidateRef,
        fim_outputs: Mapping[str, list[torch.Tensor]],
        predictions: Mapping[str, torch.Tensor],
        tsn_overrides: Optional[Mapping[str, float]],
    ) -> torch.Tensor:
        value = fim_outputs[ref.owner][ref.index]
        if not ref.scaled:
            return value
        multiplier = predictions[ref.owner]
        if tsn_overrides is not None and ref.owner in tsn_overrides:
            multiplier = torch.full_like(multiplier, float(tsn_overrides[ref.owner]))
        elif self.config.tsn_for(task).detach:
            multiplier = multiplier.detach()
        return multiplier.unsqueeze(-1) * value

    @property
    def has_gates(self) -> bool:
        return len(self.gates) > 0

    def tower_input_width(self, task: str) -> int:
        return self.towers[task].input_dim


def _stamp(specs: Sequence[FIMSpec], output_dim: int) -> tuple[FIMSpec, ...]:
    return tuple(replace(s, output_dim=output_dim) for s in specs)


def _template_sets(kind: str, schema: FeatureSchema, config: ModelConfig) -> dict[str, tuple[FIMSpec, ...]]:
    expert = FIMSpec(MLP, output_dim=config.output_dim, hidden=config.expert_hidden)
    if kind == SHARED_BOTTOM:
        return {SHARED: (expert,)}
    if kind in (MMOE, SFM):
        if config.num_experts < 1:
            raise BuildError(f"{kind} needs at least one expert")
        return {SHARED: (expert,) * config.num_experts}
    if kind == PLE:
        if config.specific_experts < 1:
            raise BuildError("ple needs at least one task-specific expert per task")
        if config.shared_experts < 0:
            raise BuildError("ple shared_experts must be non-negative")
        sets = {SHARED: (expert,) * config.shared_experts}
        sets.update({t: (expert,) * config.specific_experts for t in schema.tasks})
        return sets
    sets = {SHARED: _stamp(config.shared_fims, config.output_dim)}
    sets.update({t: _stamp(config.task_fims, config.output_dim) for t in schema.tasks})
    return sets


def _validate_sets(kind: str, schema: FeatureSchema, sets: Mapping[str, Sequence[FIMSpec]], output_dim: int) -> None:
    owners = set(sets)
    expected = {SHARED} | (set(schema.tasks) if kind in GATED_SET_ARCHITECTURES else set())
    if owners != expected:
        raise BuildError(f"{kind} expects sets {sorted(expected)}, got {sorted(owners)}")
    for owner, specs in sets.items():
        if not specs and (owner != SHARED or kind != PLE):
            raise BuildError(f"set {owner!r} of {kind} is empty")
        dims = {s.output_dim for s in specs}
        if dims and dims != {output_dim}:
            raise BuildError(f"inconsistent output_dims {sorted(dims)} in set {owner!r}; model uses {output_dim}")
    if kind in (SHARED_BOTTOM, MMOE, PLE, SFM) and any(s.kind != MLP for specs in sets.values() for s in specs):
        raise BuildError(f"{kind} experts must be mlp modules")
    if kind == SHARED_BOTTOM and len(sets[SHARED]) != 1:
        raise BuildError("shared_bottom has exactly one shared trunk")


def _gate_plan(
    kind: str, schema: FeatureSchema, config: ModelConfig, sets: Mapping[str, Sequence[FIMSpec]]
) -> dict[str, list[tuple[str, list[CandidateRef]]]]:
    refs = lambda owner, scaled=False: [
        CandidateRef(owner, i, spec.kind, scaled) for i, spec in enumerate(sets.get(owner, ()))
    ]
    plan: dict[str, list[tuple[str, list[CandidateRef]]]] = {}
    for task in schema.tasks:
        if kind == SHARED_BOTTOM:
            plan[task] = []
        elif kind in (MMOE, SFM):
            plan[task] = [(task, refs(SHARED))]
        elif kind in (PLE, TFI):
            plan[task] = [(task, refs(task) + refs(SHARED))]
        else:
            preceding = schema.task_dependencies[task]
            other = refs(SHARED)
            if preceding is not None:
                other = refs(preceding, scaled=config.tsn_for(task).enabled) + other
            plan[task] = [(f"{task}_specific", refs(task)), (f"{task}_other", other)]
    return plan


def _resolve_memonet_fields(sets: Mapping[str, Sequence[FIMSpec]], schema: FeatureSchema) -> dict[str, tuple[FIMSpec, ...]]:
    return {
        owner: tuple(
            replace(s, cross_fields=resolve_cross_fields(s, schema)) if s.kind == MEMONET else s
            for s in specs
        )
        for owner, specs in sets.items()
    }


def _pairs(spec: FIMSpec) -> int:
    if spec.kind != MEMONET or spec.cross_fields is None:
        return 0
    n = len(spec.cross_fields)
    return n * (n - 1) // 2


def _solve(spec: FIMSpec, input_dim: int) -> FIMSpec:
    if spec.parameter_budget is None:
        return spec
    return solve_for_budget(spec, input_dim, spec.parameter_budget, _pairs(spec))


def _assemble(
    kind: str,
    schema: FeatureSchema,
    config: ModelConfig,
    sets: Mapping[str, Sequence[FIMSpec]],
    interaction: Optional[FIMSpec],
) -> MultiTaskNetwork:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        interaction_module = (
            build_fim(interaction, schema.input_dim, schema) if interaction is not None else None
        )
        set_input = interaction_module.output_dim if interaction_module is not None else schema.input_dim
        modules = {owner: [build_fim(s, set_input, schema) for s in specs] for owner, specs in sets.items()}
        return MultiTaskNetwork(
            kind,
            schema,
            config,
            modules,
            _gate_plan(kind, schema, config, sets),
            interaction_module,
        )


def _assert_wiring(model: MultiTaskNetwork) -> None:
    out = model.config.output_dim
    for owner, mfi in model.sets.items():
        for i, module in enumerate(mfi.fims):
            if module.output_dim != out:
                raise BuildError(f"{owner}[{i}] outputs {module.output_dim}, expected {out}")
    for key, gate in model.gates.items():
        for ref in gate.candidates:
            if ref.owner not in model.sets or ref.index >= len(model.sets[ref.owner].fims):
                raise BuildError(f"gate {key} points at missing module {ref}")
            if model.sets[ref.owner].fims[ref.index].kind != ref.kind:
                raise BuildError(f"gate {key} candidate {ref} does not match its module")
    for spec in model.tasks:
        gates = model.task_gates[spec.name]
        if model.kind == DTN:
            if len(gates) != 2:
                raise BuildError(f"dtn task {spec.name!r} must own two gates")
            expected = 2 * out
        elif model.kind == SHARED_BOTTOM:
            if gates:
                raise BuildError("shared_bottom has no gates")
            expected = out
        else:
            expected = out
        if model.tower_input_width(spec.name) != expected:
            raise BuildError(
                f"tower {spec.name!r} input width {model.tower_input_width(spec.name)}, expected {expected}"
            )


def build_model(kind: str, schema: FeatureSchema, config: ModelConfig = ModelConfig()) -> MultiTaskNetwork:
    """
    Build one of the six architectures against `schema`.

    With `config.parameter_budget` the capacity of every expert / interaction module is
    solved so that the whole network lands within ±10% of the budget, each module taking an
    equal share of what embeddings, gates and towers leave.
    """
    if kind not in ARCHITECTURES:
        raise BuildError(f"unknown architecture {kind!r}; expected one of {ARCHITECTURES}")
    try:
        if config.task_dependencies is not None:
            schema = schema.with_dependencies(config.task_dependencies)
    except SchemaError as e:
        raise BuildError(f"invalid task dependencies: {e}") from e
    for task in schema.tasks:
        if task == SHARED or "." in task:
            raise BuildError(f"task name {task!r} is reserved or not usable as a module key")
    unknown_tsn = set(config.tsn) - set(schema.tasks)
    if unknown_tsn:
        raise BuildError(f"tsn settings for unknown tasks {sorted(unknown_tsn)}")

    if config.mfi_sets is not None:
        sets = {owner: tuple(specs) for owner, specs in config.mfi_sets.items()}
    else:
        sets = _template_sets(kind, schema, config)
    _validate_sets(kind, schema, sets, config.output_dim)
    sets = _resolve_memonet_fields(sets, schema)

    interaction = None
    if kind == SFM:
        interaction = replace(config.interaction, output_dim=config.output_dim)
        if interaction.kind == MEMONET:
            interaction = replace(interaction, cross_fields=resolve_cross_fields(interaction, schema))

    set_input = config.output_dim if kind == SFM else schema.input_dim
    if config.parameter_budget is not None:
        sets, interaction = _distribute_budget(kind, schema, config, sets, interaction, set_input)

    sets = {owner: tuple(_solve(s, set_input) for s in specs) for owner, specs in sets.items()}
    if interaction is not None:
        interaction = _solve(interaction, schema.input_dim)

    resolved = replace(
        config,
        task_dependencies=dict(schema.task_dependencies),
        mfi_sets=sets,
        interaction=interaction if interaction is not None else config.interaction,
        parameter_budget=None,
    )
    model = _assemble(kind, schema, resolved, sets, interaction)
    _assert_wiring(model)
    LOGGER.bind(kind=kind, parameters=parameter_count(model)).debug("Built multi-task network")
    return model


def _distribute_budget(
    kind: str,
    schema: FeatureSchema,
    config: ModelConfig,
    sets: Mapping[str, Sequence[FIMSpec]],
    interaction: Optional[FIMSpec],
    set_input: int,
) -> tuple[dict[str, tuple[FIMSpec, ...]], Optional[FIMSpec]]:
    budget = config.parameter_budget
    smallest = {owner: tuple(with_capacity(s, 1) for s in specs) for owner, specs in sets.items()}
    small_interaction = with_capacity(interaction, 1) if interaction is not None else None
    skeleton = _assemble(kind, schema, config, smallest, small_interaction)
    modules = [m for mfi in skeleton.sets.values() for m in mfi.fims]
    if skeleton.interaction is not None:
        modules.append(skeleton.interaction)
    fixed = parameter_count(skeleton) - sum(parameter_count(m) for m in modules)
    share = (budget - fixed) // len(modules)
    if share < 1:
        raise BuildError(f"parameter budget {budget} does not cover the {fixed} fixed parameters")
    LOGGER.bind(kind=kind, budget=budget, fixed=fixed, share=share).debug("Distributing parameter budget")
    budgeted = {owner: tuple(replace(s, parameter_budget=share) for s in specs) for owner, specs in sets.items()}
    if interaction is not None:
        interaction = replace(interaction, parameter_budget=share)
    return budgeted, interaction


@torch.no_grad()
def predict(model: MultiTaskNetwork, dataset: TabularDataset, batch_size: int = 4096) -> np.ndarray:
    """Scores [n, tasks] in schema task order."""
    model.eval()
    columns = []
    for batch in batch_iterator(dataset, batch_size):
        out = model(batch).predictions
        columns.append(torch.stack([out[t] for t in model.schema.tasks], dim=1).double().numpy())
    if not columns:
        return np.zeros((0, len(model.schema.tasks)))
    return np.concatenate(columns, axis=0)
