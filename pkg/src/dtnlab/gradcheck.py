from __future__ import annotations

import copy
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .dataset import ExampleBatch
from .errors import NumericalError, ShapeError
from .interactions import parameter_count
from .runtime import LOGGER
from .training import compute_loss

MAX_PARAMETERS = 10_000
RELATIVE_FLOOR = 1e-5

LossFn = Callable[[nn.Module, ExampleBatch], torch.Tensor]


def _default_loss(model: nn.Module, batch: ExampleBatch) -> torch.Tensor:
    return compute_loss(model(batch).predictions, batch.labels).total


def _as_double(batch: ExampleBatch) -> ExampleBatch:
    return ExampleBatch(
        categorical_ids=batch.categorical_ids,
        continuous_values=batch.continuous_values.double(),
        labels=batch.labels.double(),
    )


class _ReluPatterns:
    """Records which inputs of every ReLU are positive during one evaluation."""

    def __init__(self, model: nn.Module):
        self.patterns: list[torch.Tensor] = []
        self.handles = [
            m.register_forward_hook(self._record) for m in model.modules() if isinstance(m, nn.ReLU)
        ]

    def _record(self, module, inputs, output):
        self.patterns.append(inputs[0].detach() > 0)

    def capture(self, f: Callable[[], torch.Tensor]) -> tuple[torch.Tensor, list[torch.Tensor]]:
        self.patterns = []
        value = f()
        return value, self.patterns

    def close(self):
        for handle in self.handles:
            handle.remove()


def _same(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def gradient_check(
    model: nn.Module,
    batch: ExampleBatch,
    epsilon: float = 1e-6,
    samples: int = 100,
    seed: int = 0,
    loss_fn: Optional[LossFn] = None,
    max_parameters: int = MAX_PARAMETERS,
) -> float:
    """
    Largest relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-5) between
    autograd gradients and central differences, over `samples` randomly drawn parameter
    coordinates, on a 64-bit copy of `model`.

    Coordinates whose perturbation flips any ReLU between its active and inactive side are
    skipped, since the loss is not differentiable across the kink.
    """
    if parameter_count(model) > max_parameters:
        raise ShapeError(f"gradient checks expect at most {max_parameters} parameters, got {parameter_count(model)}")
    loss_fn = loss_fn or _default_loss
    replica = copy.deepcopy(model).double()
    replica.eval()
    batch = _as_double(batch)
    params = [p for p in replica.parameters() if p.requires_grad]
    relus = _ReluPatterns(replica)
    try:
        replica.zero_grad()
        loss, base_pattern = relus.capture(lambda: loss_fn(replica, batch))
        if not bool(torch.isfinite(loss)):
            raise NumericalError("non-finite loss", layer="loss")
        loss.backward()
        analytic = torch.cat(
            [(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in params]
        )

        sizes = [p.numel() for p in params]
        offsets = np.cumsum([0] + sizes)
        total = int(offsets[-1])
        rng = np.random.default_rng(seed)
        coordinates = rng.choice(total, size=min(samples, total), replace=False)

        worst, checked, skipped = 0.0, 0, 0
        with torch.no_grad():
            for flat in coordinates:
                which = int(np.searchsorted(offsets, flat, side="right")) - 1
                view = params[which].data.view(-1)
                position = int(flat - offsets[which])
                original = view[position].item()

                view[position] = original + epsilon
                plus, plus_pattern = relus.capture(lambda: loss_fn(replica, batch))
                view[position] = original - epsilon
                minus, minus_pattern = relus.capture(lambda: loss_fn(replica, batch))
                view[position] = original

                if not (bool(torch.isfinite(plus)) and bool(torch.isfinite(minus))):
                    raise NumericalError("non-finite loss under perturbation", layer="loss")
                if not (_same(plus_pattern, base_pattern) and _same(minus_pattern, base_pattern)):
                    skipped += 1
                    continue
                numeric = (plus.item() - minus.item()) / (2.0 * epsilon)
                exact = analytic[flat].item()
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), RELATIVE_FLOOR)
                worst = max(worst, error)
                checked += 1
    finally:
        relus.close()

    LOGGER.bind(checked=checked, skipped=skipped, max_relative_error=worst).debug("Gradient check")
    return worst
