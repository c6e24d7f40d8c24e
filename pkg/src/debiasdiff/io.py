"""Versioned JSON artifacts, config hashing and named RNG streams."""
from __future__ import annotations

import hashlib
import json
import zlib
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1


class ArtifactError(ValueError):
    """An artifact file is missing, truncated or malformed."""


class VersionError(ArtifactError):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: str | Path, doc: dict) -> None:
    # repr-based float formatting in json round-trips float64 exactly
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=None, separators=(",", ":"), allow_nan=False) + "\n")


def read_json(path: str | Path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "version" not in doc:
        raise ArtifactError(f"{path}: missing version field")
    if doc["version"] != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {doc['version']!r}, expected {FORMAT_VERSION}")
    if kind is not None and doc.get("kind", kind) != kind:
        raise ArtifactError(f"{path}: expected kind {kind!r}, found {doc.get('kind')!r}")
    return doc


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stage, fully determined by ``seed``."""
    key = zlib.crc32(name.encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
