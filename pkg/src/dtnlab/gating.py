from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Mapping, Sequence

import torch
from torch import nn

from .errors import ShapeError
from .interactions import he_uniform_

SHARED = "shared"


@dataclass(frozen=True)
class CandidateRef:
    """
    One gate input: module `index` of the set owned by `owner` (a task name or SHARED).
    `scaled` marks a task-sensitive candidate, multiplied by the owner task's prediction.
    """

    owner: str
    index: int
    kind: str
    scaled: bool = False

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> CandidateRef:
        return CandidateRef(**dict(data))


class GatingNetwork(nn.Module):
    """Single linear layer from the selector input to one logit per candidate, then softmax."""

    def __init__(self, task: str, selector_dim: int, candidates: Sequence[CandidateRef]):
        super().__init__()
        if not candidates:
            raise ShapeError(f"gate of task {task!r} has no candidates")
        self.task = task
        self.candidates = list(candidates)
        self.linear = nn.Linear(selector_dim, len(self.candidates))
        he_uniform_(self.linear)

    @property
    def size(self) -> int:
        return len(self.candidates)

    def weights(self, selector: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.linear(selector), dim=-1)

    def forward(
        self, selector: torch.Tensor, candidates: Sequence[torch.Tensor]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (weights [batch, k], weighted sum [batch, width])."""
        if len(candidates) != self.size:
            raise ShapeError(
                f"gate of task {self.task!r} expects {self.size} candidates, got {len(candidates)}"
            )
        widths = {c.shape[-1] for c in candidates}
        if len(widths) != 1:
            raise ShapeError(f"gate of task {self.task!r} got candidates of widths {sorted(widths)}")
        weights = self.weights(selector)
        stacked = torch.stack(list(candidates), dim=1)
        return weights, (weights.unsqueeze(-1) * stacked).sum(dim=1)

    def keep(self, rows: Sequence[int]) -> None:
        """Drop every candidate not in `rows`; surviving logits keep their parameters."""
        rows = list(rows)
        if not rows:
            raise ShapeError(f"gate of task {self.task!r} would lose all candidates")
        linear = nn.Linear(
            self.linear.in_features,
            len(rows),
            dtype=self.linear.weight.dtype,
            device=self.linear.weight.device,
        )
        with torch.no_grad():
            linear.weight.copy_(self.linear.weight[rows])
            linear.bias.copy_(self.linear.bias[rows])
        self.linear = linear
        self.candidates = [self.candidates[r] for r in rows]
