"""
Feature-interaction modules (FIMs).

Every module maps a `ModelInput` (the concatenated embedding vector x plus the raw
categorical ids) to a vector of width `output_dim`, so modules of different kinds can be
mixed inside one gated set.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from itertools import combinations
from typing import Any, Callable, Mapping, Optional

import torch
from torch import nn

from .errors import BuildError, ShapeError
from .schema import FeatureSchema

MLP = "mlp"
GDCN = "gdcn"
MASKNET = "masknet"
MEMONET = "memonet"
FIM_KINDS = (MLP, GDCN, MASKNET, MEMONET)

DEFAULT_OUTPUT_DIM = 512
DEFAULT_MLP_HIDDEN = (256,)
MEMONET_DEFAULT_FIELDS = 8
PARITY_TOLERANCE = 0.10


@dataclass(frozen=True)
class FIMSpec:
    """
    Configuration of one interaction module. Only the fields of its `kind` are read:

    - mlp: `hidden` widths (ReLU between layers)
    - gdcn: `cross_layers`, optional `rank` factorizing the cross and gate matrices
    - masknet: `mask_hidden` width and the mask network's `mask_bottleneck`
    - memonet: `codebook_size`, `code_dim`, `num_hashes`, `cross_fields`
    """

    kind: str
    output_dim: int = DEFAULT_OUTPUT_DIM
    hidden: Optional[tuple[int, ...]] = None
    cross_layers: int = 2
    rank: Optional[int] = None
    mask_hidden: int = 640
    mask_bottleneck: int = 128
    codebook_size: int = 2**14
    code_dim: int = 16
    num_hashes: int = 2
    cross_fields: Optional[tuple[str, ...]] = None
    parameter_budget: Optional[int] = None

    def __post_init__(self):
        if self.kind not in FIM_KINDS:
            raise BuildError(f"unknown interaction kind {self.kind!r}; expected one of {FIM_KINDS}")
        if self.hidden is not None:
            object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.cross_fields is not None:
            object.__setattr__(self, "cross_fields", tuple(self.cross_fields))
        positive = {
            "output_dim": self.output_dim,
            "cross_layers": self.cross_layers,
            "mask_hidden": self.mask_hidden,
            "mask_bottleneck": self.mask_bottleneck,
            "codebook_size": self.codebook_size,
            "code_dim": self.code_dim,
            "num_hashes": self.num_hashes,
        }
        if self.rank is not None:
            positive["rank"] = self.rank
        if self.parameter_budget is not None:
            positive["parameter_budget"] = self.parameter_budget
        for name, value in positive.items():
            if value < 1:
                raise BuildError(f"{self.kind}.{name} must be positive, got {value}")
        if self.hidden is not None and any(w < 1 for w in self.hidden):
            raise BuildError(f"{self.kind}.hidden widths must be positive")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        for key in ("hidden", "cross_fields"):
            if data[key] is not None:
                data[key] = list(data[key])
        return data

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> FIMSpec:
        return FIMSpec(**dict(data))


@dataclass(frozen=True)
class ModelInput:
    """What every FIM sees: x [batch, input_dim] and the categorical ids [batch, n_categorical]."""

    x: torch.Tensor
    categorical_ids: torch.Tensor


def he_uniform_(linear: nn.Linear) -> None:
    bound = math.sqrt(6.0 / linear.in_features)
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound)
        if linear.bias is not None:
            linear.bias.zero_()


def parameter_count(module: nn.Module) -> int:
    """Number of scalar learnable parameters."""
    return sum(p.numel() for p in module.parameters())


class InteractionModule(nn.Module):
    kind: str = ""

    def __init__(self, spec: FIMSpec, input_dim: int):
        super().__init__()
        self.spec = spec
        self.input_dim = input_dim
        self.output_dim = spec.output_dim

    def forward(self, inputs: ModelInput) -> torch.Tensor:
        if inputs.x.shape[-1] != self.input_dim:
            raise ShapeError(
                f"{self.kind} expects input width {self.input_dim}, got {inputs.x.shape[-1]}"
            )
        return self._forward(inputs)

    def _forward(self, inputs: ModelInput) -> torch.Tensor:
        raise NotImplementedError

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                he_uniform_(module)


def mlp_layers(input_dim: int, hidden: tuple[int, ...], output_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    width = input_dim
    for h in hidden:
        layers += [nn.Linear(width, h), nn.ReLU()]
        width = h
    layers.append(nn.Linear(width, output_dim))
    return nn.Sequential(*layers)


class MLPExpert(InteractionModule):
    """Plain feed-forward expert of the Shared-Bottom / MMoE / PLE baselines."""

    kind = MLP

    def __init__(self, spec: FIMSpec, input_dim: int):
        super().__init__(spec, input_dim)
        self.hidden = spec.hidden if spec.hidden is not None else DEFAULT_MLP_HIDDEN
        self.net = mlp_layers(input_dim, self.hidden, spec.output_dim)
        self.reset_parameters()

    def _forward(self, inputs: ModelInput) -> torch.Tensor:
        return self.net(inputs.x)

    @staticmethod
    def count(spec: FIMSpec, input_dim: int, n_pairs: int = 0) -> int:
        widths = [input_dim, *(spec.hidden if spec.hidden is not None else DEFAULT_MLP_HIDDEN), spec.output_dim]
        return sum(a * b + b for a, b in zip(widths, widths[1:]))


class _Affine(nn.Module):
    """W c + b, with W optionally factorized as U V of the given rank."""

    def __init__(self, width: int, rank: Optional[int]):
        super().__init__()
        if rank is None:
            self.down = None
            self.up = nn.Linear(width, width)
        else:
            self.down = nn.Linear(width, rank, bias=False)
            self.up = nn.Linear(rank, width)

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return self.up(c if self.down is None else self.down(c))


class GatedCrossNetwork(InteractionModule):
    """
    Gated cross layers: c_{l+1} = c_0 * (W_c c_l + b_c) * sigmoid(W_g c_l + b_g) + c_l,
    starting from c_0 = x, followed by a linear projection to output_dim.
    """

    kind = GDCN

    def __init__(self, spec: FIMSpec, input_dim: int):
        super().__init__(spec, input_dim)
        self.cross = nn.ModuleList(_Affine(input_dim, spec.rank) for _ in range(spec.cross_layers))
        self.gate = nn.ModuleList(_Affine(input_dim, spec.rank) for _ in range(spec.cross_layers))
        self.projection = nn.Linear(input_dim, spec.output_dim)
        self.reset_parameters()

    def _forward(self, inputs: ModelInput) -> torch.Tensor:
        c0 = inputs.x
        c = c0
        for cross, gate in zip(self.cross, self.gate):
            c = c0 * cross(c) * torch.sigmoid(gate(c)) + c
        return self.projection(c)

    @staticmethod
    def count(spec: FIMSpec, input_dim: int, n_pairs: int = 0) -> int:
        d = input_dim
        matrix = d * d if spec.rank is None else 2 * d * spec.rank
        return spec.cross_layers * 2 * (matrix + d) + d * spec.output_dim + spec.output_dim


class MaskBlock(InteractionModule):
    """
    Instance-guided mask block: a bottleneck network turns x into a mask of width
    `mask_hidden`; x is also mapped linearly to that width and layer-normalized, the two are
    multiplied element-wise, passed through ReLU and compressed to output_dim.
    """

    kind = MASKNET

    def __init__(self, spec: FIMSpec, input_dim: int):
        super().__init__(spec, input_dim)
        self.mask = nn.Sequential(
            nn.Linear(input_dim, spec.mask_bottleneck),
            nn.ReLU(),
            nn.Linear(spec.mask_bottleneck, spec.mask_hidden),
        )
        self.hidden = nn.Linear(input_dim, spec.mask_hidden)
        self.norm = nn.LayerNorm(spec.mask_hidden)
        self.activation = nn.ReLU()
        self.compress = nn.Linear(spec.mask_hidden, spec.output_dim)
        self.reset_parameters()

    def _forward(self, inputs: ModelInput) -> torch.Tensor:
        mask = self.mask(inputs.x)
        hidden = self.norm(self.hidden(inputs.x))
        return self.compress(self.activation(hidden * mask))

    @staticmethod
    def count(spec: FIMSpec, input_dim: int, n_pairs: int = 0) -> int:
        d, m, h, o = input_dim, spec.mask_bottleneck, spec.mask_hidden, spec.output_dim
        return (d * m + m) + (m * h + h) + (d * h + h) + 2 * h + (h * o + o)


# Odd 63-bit multipliers and offsets of the multiply-shift hash family, one row per codebook.
_HASH_CONSTANTS = (
    (0x5BD1E9955BD1E995, 0x27D4EB2F165667C5),
    (0x1B873593CC9E2D51, 0x165667B19E3779F9),
    (0x2545F4914F6CDD1D, 0x61C8864680B583EB),
    (0x3C6EF372FE94F82B, 0x4CF5AD432745937F),
)
_PAIR_KEY_MULTIPLIERS = (0x9E3779B97F4A7C1, 0x632BE59BD9B4E01)
_HASH_SHIFT = 17


class HashCodebookNetwork(InteractionModule):
    """
    Hash-codebook memory over 2-order crosses of selected categorical fields.

    Each selected field pair is turned into a 64-bit key and hashed by `num_hashes`
    independent multiply-shift functions into as many codebooks. The retrieved codes are
    summed, mixed by a shared linear map, and all pair representations are concatenated and
    projected to output_dim. Fields outside the selection never enter.
    """

    kind = MEMONET

    def __init__(self, spec: FIMSpec, input_dim: int, field_columns: list[int]):
        super().__init__(spec, input_dim)
        if spec.num_hashes > len(_HASH_CONSTANTS):
            raise BuildError(f"memonet supports at most {len(_HASH_CONSTANTS)} hash functions")
        pairs = list(combinations(field_columns, 2))
        if not pairs:
            raise BuildError("memonet needs at least two cross fields")
        self.register_buffer("first", torch.tensor([a for a, _ in pairs], dtype=torch.long), persistent=False)
        self.register_buffer("second", torch.tensor([b for _, b in pairs], dtype=torch.long), persistent=False)
        self.n_pairs = len(pairs)
        self.codebooks = nn.ModuleList(
            nn.Embedding(spec.codebook_size, spec.code_dim) for _ in range(spec.num_hashes)
        )
        self.combine = nn.Linear(spec.code_dim, spec.code_dim, bias=False)
        self.projection = nn.Linear(self.n_pairs * spec.code_dim, spec.output_dim)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        super().reset_parameters()
        for codebook in self.codebooks:
            nn.init.normal_(codebook.weight, mean=0.0, std=0.01)

    def pair_keys(self, categorical_ids: torch.Tensor) -> torch.Tensor:
        first = categorical_ids[:, self.first]
        second = categorical_ids[:, self.second]
        position = torch.arange(self.n_pairs, device=categorical_ids.device)
        # int64 arithmetic wraps around, which is what the hash family expects
        return (first * _PAIR_KEY_MULTIPLIERS[0] + second) * _PAIR_KEY_MULTIPLIERS[1] + position

    def slots(self, keys: torch.Tensor, hash_index: int) -> torch.Tensor:
        multiplier, offset = _HASH_CONSTANTS[hash_index]
        mixed = (keys * _signed(multiplier) + _signed(offset)) >> _HASH_SHIFT
        return torch.remainder(mixed, self.spec.codebook_size)

    def forward(self, inputs: ModelInput) -> torch.Tensor:
        ids = inputs.categorical_ids
        if ids.shape[-1] <= int(max(self.first.max(), self.second.max())):
            raise ShapeError(f"memonet expects at least {int(self.second.max()) + 1} categorical columns")
        return self._forward(inputs)

    def _forward(self, inputs: ModelInput) -> torch.Tensor:
        keys = self.pair_keys(inputs.categorical_ids)
        codes = sum(codebook(self.slots(keys, k)) for k, codebook in enumerate(self.codebooks))
        pairs = self.combine(codes)
        return self.projection(pairs.flatten(start_dim=1))

    @staticmethod
    def count(spec: FIMSpec, input_dim: int, n_pairs: int = 1) -> int:
        c = spec.code_dim
        return spec.num_hashes * spec.codebook_size * c + c * c + n_pairs * c * spec.output_dim + spec.output_dim


def _signed(value: int) -> int:
    return value - (1 << 64) if value >= 1 << 63 else value


FIM_CLASSES: dict[str, type[InteractionModule]] = {
    MLP: MLPExpert,
    GDCN: GatedCrossNetwork,
    MASKNET: MaskBlock,
    MEMONET: HashCodebookNetwork,
}


def resolve_cross_fields(spec: FIMSpec, schema: FeatureSchema) -> tuple[str, ...]:
    """Selected fields, or the highest-cardinality categorical fields when none are named."""
    categorical = [f.name for f in schema.categorical]
    if spec.cross_fields is not None:
        missing = [f for f in spec.cross_fields if f not in categorical]
        if missing:
            raise BuildError(f"memonet cross fields {missing} are not categorical features")
        return tuple(f for f in categorical if f in spec.cross_fields)
    ranked = sorted(schema.categorical, key=lambda f: -f.vocab_size)
    chosen = {f.name for f in ranked[:MEMONET_DEFAULT_FIELDS]}
    return tuple(f for f in categorical if f in chosen)


def predicted_count(spec: FIMSpec, input_dim: int, n_pairs: int = 0) -> int:
    return FIM_CLASSES[spec.kind].count(spec, input_dim, n_pairs)


def build_fim(spec: FIMSpec, input_dim: int, schema: FeatureSchema) -> InteractionModule:
    if spec.kind == MEMONET:
        fields = resolve_cross_fields(spec, schema)
        columns = [[f.name for f in schema.categorical].index(name) for name in fields]
        return HashCodebookNetwork(replace(spec, cross_fields=fields), input_dim, columns)
    return FIM_CLASSES[spec.kind](spec, input_dim)


def with_capacity(spec: FIMSpec, knob: int) -> FIMSpec:
    if spec.kind == MLP:
        depth = len(spec.hidden) if spec.hidden else len(DEFAULT_MLP_HIDDEN)
        return replace(spec, hidden=(knob,) * depth)
    if spec.kind == GDCN:
        return replace(spec, rank=knob)
    if spec.kind == MASKNET:
        return replace(spec, mask_hidden=knob)
    return replace(spec, codebook_size=knob)


def solve_for_budget(spec: FIMSpec, input_dim: int, budget: int, n_pairs: int = 0) -> FIMSpec:
    """
    Pick the kind's capacity knob (MLP hidden width, GDCN rank, MaskNet hidden width or
    MemoNet codebook size) so that the module's parameter count is closest to `budget`.
    Raises BuildError when no knob value lands within ±10%.
    """
    count: Callable[[int], int] = lambda knob: predicted_count(with_capacity(spec, knob), input_dim, n_pairs)
    high = 1
    while count(high) < budget and high < 1 << 31:
        high *= 2
    low = 1
    while low < high:
        middle = (low + high) // 2
        if count(middle) < budget:
            low = middle + 1
        else:
            high = middle
    best = min((k for k in (low - 1, low) if k >= 1), key=lambda k: abs(count(k) - budget))
    realized = count(best)
    if abs(realized - budget) > PARITY_TOLERANCE * budget:
        raise BuildError(
            f"{spec.kind} cannot realize a budget of {budget} parameters (closest: {realized})"
        )
    return replace(with_capacity(spec, best), parameter_budget=budget)
