"""Artifact tracking and run manifests."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

from clothloop.errors import InputError

MANIFEST_NAME = "manifest.json"


def file_hash(path: Path) -> str:
    """SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(payload: Any) -> str:
    """SHA-256 of a JSON-serializable payload in canonical form."""
    encoded = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(encoded).hexdigest()


class ArtifactTracker:
    """Tracks written artifacts by hash with sizes and paths."""

    def __init__(self, root: Path, config_digest: str = "") -> None:
        """Initialize the ArtifactTracker.

        Args:
            root (Path): Directory the tracked paths are relative to.
            config_digest (str): Hash of the scenario and settings that produced the run.
        """
        self.root = root
        self.config_digest = config_digest
        self.tracked_files: dict[str, dict] = {}

    def track_file(self, path: Path, kind: str) -> str:
        """Track a written file by its hash.

        Args:
            path (Path): File to track.
            kind (str): Artifact category (``mesh``, ``cloud``, ``metrics`` ...).

        Returns:
            str: The file's hash.
        """
        digest = file_hash(path)
        size = path.stat().st_size
        if digest not in self.tracked_files:
            self.tracked_files[digest] = {"size": size, "kind": kind, "paths": []}
        elif self.tracked_files[digest]["size"] != size:
            msg = f"Hash collision detected for hash {digest} with differing sizes."
            raise RuntimeError(msg)
        relative = path.relative_to(self.root).as_posix() if path.is_relative_to(self.root) else str(path)
        if relative not in self.tracked_files[digest]["paths"]:
            self.tracked_files[digest]["paths"].append(relative)
        return digest

    def write_manifest(self, extra: dict[str, Any] | None = None, name: str = MANIFEST_NAME) -> Path:
        """Write the sorted manifest (files by path, config hash, extras) to ``root/name``."""
        files = sorted(
            (
                {"path": p, "sha256": digest, "size": info["size"], "kind": info["kind"]}
                for digest, info in self.tracked_files.items()
                for p in info["paths"]
            ),
            key=lambda entry: entry["path"],
        )
        manifest = {"config_hash": self.config_digest, "files": files, **(extra or {})}
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def read_manifest(directory: Path, name: str = MANIFEST_NAME) -> dict[str, Any]:
    """Load a manifest written by :meth:`ArtifactTracker.write_manifest`.

    Raises:
        InputError: If it is missing or not JSON.
    """
    path = directory / name
    if not path.is_file():
        msg = f"missing manifest: {path}"
        raise InputError(msg)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as err:
        msg = f"{path} is not valid JSON: {err}"
        raise InputError(msg) from err
