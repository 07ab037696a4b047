"""Run manifests: digests and seeds that make every command reproducible."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

MANIFEST_SCHEMA_VERSION = 1


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, config_hash: str, seeds: dict,
                   inputs: dict, outputs, wall_time_s: float,
                   extra: dict | None = None) -> Path:
    """Record a command run; inputs is {name: path}, outputs a list of paths."""
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "command": command,
        "config_hash": config_hash,
        "seeds": seeds,
        "input_digests": {str(name): file_digest(p) for name, p in inputs.items()},
        "output_digests": {str(Path(p).name): file_digest(p) for p in outputs},
        "wall_time_s": wall_time_s,
    }
    if extra:
        doc.update(extra)
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
