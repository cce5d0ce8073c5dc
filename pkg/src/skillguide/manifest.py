"""Run manifests: small ``key: value`` text files tying outputs to config, seed and content."""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional

from . import __version__
from .core import ArtifactError, Config


def content_version(path) -> str:
    """Git blob id of a file: sha1 over ``b"blob <size>\\0" + content``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(path, config: Config, fields: Optional[dict] = None) -> Path:
    entries = {"package_version": __version__, "config_hash": config.digest(),
               "seed": config.seed, "experiment": config.name}
    entries.update(fields or {})
    path = Path(path)
    path.write_text("".join(f"{k}: {v}\n" for k, v in entries.items()))
    return path


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ArtifactError(f"malformed manifest line in {path}: {line!r}")
        out[key.strip()] = value.strip()
    return out


def write_sidecar(artifact, config: Config, fields: Optional[dict] = None) -> Path:
    """Manifest beside ``artifact`` as ``<artifact>.manifest``."""
    artifact = Path(artifact)
    entries = {"artifact": artifact.name, "content_version": content_version(artifact)}
    entries.update(fields or {})
    return write_manifest(artifact.with_name(artifact.name + ".manifest"), config, entries)
