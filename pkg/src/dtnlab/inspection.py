"""
Looking inside trained networks: mean gate weights per candidate, gate-weight trimming and
per-module representation exports.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from torch import nn

from .dataset import TabularDataset, batch_iterator
from .errors import InspectionError
from .interactions import parameter_count
from .models import MultiTaskNetwork
from .runtime import LOGGER


@dataclass(frozen=True)
class GateWeightReport:
    """
    Dataset-mean softmax weight of every gate candidate. One row per (gate, candidate) with
    columns task, gate, position, owner, index, kind, scaled, mean_weight.
    """

    frame: pd.DataFrame

    def gate(self, key: str) -> pd.DataFrame:
        rows = self.frame[self.frame["gate"] == key]
        if rows.empty:
            raise InspectionError(f"no gate named {key!r}")
        return rows

    def sums(self) -> pd.Series:
        return self.frame.groupby("gate", sort=False)["mean_weight"].sum()

    def module_weights(self, owner: str, index: int) -> list[float]:
        """Mean weights every gate referencing module `index` of set `owner` gives it."""
        rows = self.frame[(self.frame["owner"] == owner) & (self.frame["index"] == index)]
        return rows["mean_weight"].tolist()

    def write(self, path: str | Path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.6f")


@torch.no_grad()
def extract_gate_weights(
    model: MultiTaskNetwork, dataset: TabularDataset, batch_size: int = 4096
) -> GateWeightReport:
    if not model.has_gates:
        raise InspectionError(f"{model.kind} has no gates to inspect")
    if len(dataset) == 0:
        raise InspectionError("cannot average gate weights over an empty dataset")
    model.eval()
    totals: dict[str, torch.Tensor] = {}
    for batch in batch_iterator(dataset, batch_size):
        for key, weights in model(batch).gate_weights.items():
            summed = weights.double().sum(dim=0)
            totals[key] = totals[key] + summed if key in totals else summed

    rows = []
    for key, gate in model.gates.items():
        means = (totals[key] / len(dataset)).tolist()
        for position, (ref, mean) in enumerate(zip(gate.candidates, means)):
            rows.append(
                {
                    "task": gate.task,
                    "gate": key,
                    "position": position,
                    "owner": ref.owner,
                    "index": ref.index,
                    "kind": ref.kind,
                    "scaled": ref.scaled,
                    "mean_weight": mean,
                }
            )
    return GateWeightReport(pd.DataFrame(rows))


@dataclass(frozen=True)
class KeepList:
    """Module indices to keep per set; sets not listed keep everything."""

    keep: Mapping[str, Sequence[int]]


@dataclass(frozen=True)
class GateThreshold:
    """
    Remove a module when every gate that can select it gives it a mean weight below
    `threshold`.
    """

    threshold: float
    report: GateWeightReport


TrimRule = KeepList | GateThreshold


def _removed_by(model: MultiTaskNetwork, rule: TrimRule) -> set[tuple[str, int]]:
    present = {(owner, i) for owner, mfi in model.sets.items() for i in range(len(mfi.fims))}
    if isinstance(rule, KeepList):
        removed = set()
        for owner, keep in rule.keep.items():
            if owner not in model.sets:
                raise InspectionError(f"keep-list names unknown set {owner!r}")
            bad = [i for i in keep if (owner, i) not in present]
            if bad:
                raise InspectionError(f"keep-list for {owner!r} names missing modules {bad}")
            removed |= {(owner, i) for i in range(len(model.sets[owner].fims)) if i not in keep}
        return removed
    removed = set()
    for owner, index in present:
        weights = rule.report.module_weights(owner, index)
        if weights and all(w < rule.threshold for w in weights):
            removed.add((owner, index))
    return removed


def trim_model(model: MultiTaskNetwork, rule: TrimRule) -> MultiTaskNetwork:
    """
    Copy of `model` without the modules `rule` removes.

    Gates drop the logit rows of removed candidates and keep the rest, so the softmax is
    renormalized over the survivors. Removing nothing returns an exact copy.
    """
    removed = _removed_by(model, rule)
    for owner, mfi in model.sets.items():
        if len(mfi.fims) and all((owner, i) in removed for i in range(len(mfi.fims))):
            raise InspectionError(f"trimming would empty the {owner!r} set")

    trimmed = copy.deepcopy(model)
    new_index: dict[tuple[str, int], int] = {}
    sets = {}
    for owner, mfi in trimmed.sets.items():
        survivors = [i for i in range(len(mfi.fims)) if (owner, i) not in removed]
        new_index.update({(owner, old): new for new, old in enumerate(survivors)})
        mfi.fims = nn.ModuleList([mfi.fims[i] for i in survivors])
        sets[owner] = mfi.specs

    for gate in trimmed.gates.values():
        rows = [r for r, ref in enumerate(gate.candidates) if (ref.owner, ref.index) not in removed]
        gate.keep(rows)
        gate.candidates = [replace(ref, index=new_index[(ref.owner, ref.index)]) for ref in gate.candidates]
    trimmed.config = replace(trimmed.config, mfi_sets=sets)

    before, after = parameter_count(model), parameter_count(trimmed)
    if removed and after >= before:
        raise InspectionError("trimming did not reduce the parameter count")
    LOGGER.bind(removed=sorted(removed), parameters_before=before, parameters_after=after).info(
        f"Trimmed {len(removed)} modules"
    )
    return trimmed


@dataclass(frozen=True)
class SetSelector:
    """A module set, narrowed to one position or to one module kind."""

    owner: str
    index: Optional[int] = None
    kind: Optional[str] = None

    @staticmethod
    def parse(text: str) -> SetSelector:
        """`owner`, `owner:index` or `owner:kind`."""
        owner, _, rest = text.partition(":")
        if not owner:
            raise InspectionError(f"selector {text!r} names no set owner")
        if not rest:
            return SetSelector(owner)
        if rest.isdigit():
            return SetSelector(owner, index=int(rest))
        return SetSelector(owner, kind=rest)


def _matches(model: MultiTaskNetwork, selector: SetSelector) -> list[int]:
    if selector.owner not in model.sets:
        raise InspectionError(f"no module set owned by {selector.owner!r}")
    kinds = model.sets[selector.owner].kinds
    found = [
        i
        for i, kind in enumerate(kinds)
        if (selector.index is None or i == selector.index) and (selector.kind is None or kind == selector.kind)
    ]
    if not found:
        raise InspectionError(f"selector {selector} matches no module")
    return found


@dataclass(frozen=True)
class RepresentationExport:
    """Module output vectors: one row per (module, sampled example) with its labels."""

    vectors: np.ndarray
    owners: tuple[str, ...]
    kinds: tuple[str, ...]
    indices: tuple[int, ...]
    examples: tuple[int, ...]

    def group(self, owner: str, kind: Optional[str] = None) -> np.ndarray:
        mask = np.array([o == owner and (kind is None or k == kind) for o, k in zip(self.owners, self.kinds)])
        return self.vectors[mask]

    def to_frame(self) -> pd.DataFrame:
        labels = pd.DataFrame(
            {"owner": self.owners, "kind": self.kinds, "index": self.indices, "example": self.examples}
        )
        values = pd.DataFrame(self.vectors, columns=[f"v{j}" for j in range(self.vectors.shape[1])])
        return pd.concat([labels, values], axis=1)

    def write(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6g")


@torch.no_grad()
def export_representations(
    model: MultiTaskNetwork,
    dataset: TabularDataset,
    selectors: Sequence[SetSelector],
    sample_count: int = 1000,
    seed: int = 0,
    batch_size: int = 4096,
) -> RepresentationExport:
    """Outputs of the selected modules on `sample_count` examples drawn without replacement."""
    if not 1 <= sample_count <= len(dataset):
        raise InspectionError(f"sample_count must be in [1, {len(dataset)}], got {sample_count}")
    wanted = list(dict.fromkeys((s.owner, i) for s in selectors for i in _matches(model, s)))
    rows = np.sort(np.random.default_rng(seed).choice(len(dataset), size=sample_count, replace=False))
    sample = dataset.take(rows)

    model.eval()
    collected: dict[tuple[str, int], list[np.ndarray]] = {key: [] for key in wanted}
    for batch in batch_iterator(sample, batch_size):
        outputs = model(batch).fim_outputs
        for owner, index in wanted:
            collected[(owner, index)].append(outputs[owner][index].double().numpy())

    vectors, owners, kinds, indices, examples = [], [], [], [], []
    for owner, index in wanted:
        block = np.concatenate(collected[(owner, index)], axis=0)
        kind = model.sets[owner].kinds[index]
        vectors.append(block)
        owners += [owner] * len(rows)
        kinds += [kind] * len(rows)
        indices += [index] * len(rows)
        examples += rows.tolist()
    return RepresentationExport(
        np.concatenate(vectors, axis=0), tuple(owners), tuple(kinds), tuple(indices), tuple(examples)
    )
