from __future__ import annotations

from pathlib import Path

import torch

from .errors import BuildError, CheckpointError, SchemaError
from .models import ModelConfig, MultiTaskNetwork, build_model
from .runtime import LOGGER
from .schema import FeatureSchema

CHECKPOINT_FORMAT = "dtnlab-checkpoint/1"


def save_checkpoint(model: MultiTaskNetwork, path: str | Path) -> None:
    """
    Write a self-describing checkpoint: architecture kind, schema, resolved model config and
    every named parameter block with its shape. Trimmed models save like any other.
    """
    state = {name: tensor.detach().cpu().clone() for name, tensor in model.state_dict().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "schema": model.schema.to_dict(),
        "config": model.config.to_dict(),
        "parameters": state,
        "shapes": {name: list(tensor.shape) for name, tensor in state.items()},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    LOGGER.bind(kind=model.kind, path=str(path)).debug("Saved checkpoint")


def load_checkpoint(path: str | Path) -> MultiTaskNetwork:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")

    parameters = payload["parameters"]
    for name, shape in payload["shapes"].items():
        if name not in parameters or list(parameters[name].shape) != shape:
            raise CheckpointError(f"{path}: parameter block {name!r} does not match its recorded shape")
    try:
        model = build_model(
            payload["kind"],
            FeatureSchema.from_dict(payload["schema"]),
            ModelConfig.from_dict(payload["config"]),
        )
    except (BuildError, SchemaError, TypeError) as e:
        raise CheckpointError(f"{path}: cannot rebuild the recorded model ({e})") from e

    dtypes = {t.dtype for t in parameters.values() if t.is_floating_point()}
    if dtypes == {torch.float64}:
        model = model.double()
    try:
        model.load_state_dict(parameters, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not fit the rebuilt model ({e})") from e
    model.eval()
    return model
