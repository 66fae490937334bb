"""Checkpoint directories: ``manifest.json`` plus ``params.bin``.

``params.bin`` holds every parameter as little-endian float32, concatenated in
manifest order (names sorted lexicographically). Saving the same checkpoint
twice produces identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig, _build, _plain
from .params import ParameterStore

FORMAT = "cmr-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """Missing, corrupt or structurally incompatible checkpoint."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParameterStore
    provenance: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        entries, offset = [], 0
        for name in self.params.names():
            arr = self.params[name]
            info = self.params.info[name]
            entries.append({
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "count": int(arr.size),
                "kind": info.kind,
                "frozen": info.frozen,
            })
            offset += int(arr.size)
        return {
            "format": FORMAT,
            "version": VERSION,
            "config": _plain(self.config),
            "parameters": entries,
            "provenance": self.provenance,
        }

    def save(self, directory) -> Path:
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        manifest = self.manifest()
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        with open(path / "params.bin", "wb") as fh:
            for name in self.params.names():
                fh.write(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        return path

    @classmethod
    def load(cls, directory, dtype=np.float64) -> "Checkpoint":
        path = Path(directory)
        try:
            manifest = json.loads((path / "manifest.json").read_text())
            blob = (path / "params.bin").read_bytes()
        except FileNotFoundError as exc:
            raise CheckpointError(f"{path}: missing checkpoint file {exc.filename}") from exc
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt manifest ({exc.msg})") from exc
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} directory")
        try:
            config = _build(ModelConfig, manifest["config"], "checkpoint config").validate()
        except (ConfigError, TypeError) as exc:
            raise CheckpointError(f"{path}: bad config ({exc})") from exc
        flat = np.frombuffer(blob, dtype="<f4")
        total = sum(e["count"] for e in manifest["parameters"])
        if flat.size != total:
            raise CheckpointError(f"{path}: params.bin holds {flat.size} floats, manifest expects {total}")
        store = ParameterStore()
        for e in manifest["parameters"]:
            arr = flat[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"]).astype(dtype)
            store.add(e["name"], arr, e["kind"], e["frozen"])
        return cls(config, store, manifest.get("provenance", {}))


def structural_diff(expected: ParameterStore, found: ParameterStore, skip_prefix: str) -> list[str]:
    """Human-readable differences between two parameter sets, ignoring ``skip_prefix``."""
    problems = []
    for name in expected.names():
        if name.startswith(skip_prefix):
            continue
        if name not in found:
            problems.append(f"missing parameter {name}")
        elif found[name].shape != expected[name].shape:
            problems.append(f"{name}: shape {found[name].shape} != expected {expected[name].shape}")
        elif found.info[name].frozen != expected.info[name].frozen:
            problems.append(f"{name}: frozen flag differs")
    return problems
