"""
Run manifests (`run.json`): what was trained, on which data, from which commit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

import git

from .errors import ReportError
from .runtime import LOGGER

MANIFEST_NAME = "run.json"


def git_commit(path: str | Path = ".") -> Optional[str]:
    """Commit of the repository containing `path`, suffixed `-dirty` with local changes."""
    try:
        repo = git.Repo(path, search_parent_directories=True)
        commit = repo.head.commit.hexsha
    except (git.InvalidGitRepositoryError, git.NoSuchPathError, ValueError):
        return None
    return f"{commit}-dirty" if repo.is_dirty(untracked_files=False) else commit


@dataclass(frozen=True)
class RunManifest:
    name: str
    kind: str
    dataset_fingerprint: str
    parameters: int
    seed: int
    git_commit: Optional[str] = None
    trimmed_from: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> RunManifest:
        return RunManifest(**dict(data))


def write_manifest(manifest: RunManifest, directory: str | Path) -> Path:
    path = Path(directory) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    LOGGER.bind(run=manifest.name, commit=manifest.git_commit).debug(f"Wrote {path}")
    return path


def read_manifest(directory: str | Path) -> RunManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise ReportError(f"{directory} has no {MANIFEST_NAME}")
    try:
        return RunManifest.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, TypeError) as e:
        raise ReportError(f"{path}: malformed manifest ({e})") from e
