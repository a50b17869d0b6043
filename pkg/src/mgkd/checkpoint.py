"""Checkpoint persistence: a versioned single-file archive of float32 blobs.

Byte layout
-----------
A checkpoint is a ZIP archive (no compression, zeroed timestamps, entries
in sorted order) containing:

* ``manifest.json`` -- format version plus one record per blob:
  ``{"part", "name", "shape", "dtype"}`` where dtype is always ``"<f4"``
  (raw little-endian float32).
* ``metadata.json`` -- caller-supplied metadata, serialized with sorted
  keys.
* ``blobs/<part>/<name>.bin`` -- the raw array bytes in C order.

Because every byte of the archive is a deterministic function of the
parameters and metadata, ``save(load(save(x)))`` is byte-identical and
parameter round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointFormatError, CheckpointVersionError, InvalidArgumentError

FORMAT_VERSION = 1

_ZERO_TIME = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    """Named parameter blobs grouped by part, plus free-form metadata."""

    parts: dict[str, dict[str, np.ndarray]]
    metadata: dict[str, Any] = field(default_factory=dict)


def _iter_blobs(parts):
    for part_name in sorted(parts):
        blobs = parts[part_name]
        for name in sorted(blobs):
            yield part_name, name, blobs[name]


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write a checkpoint archive; see the module docstring for the layout."""
    path = Path(path)
    manifest = {"format_version": FORMAT_VERSION, "blobs": []}
    for part_name, name, arr in _iter_blobs(ckpt.parts):
        if arr.dtype != np.float32:
            raise InvalidArgumentError(
                f"{part_name}.{name}: checkpoint blobs must be float32, got {arr.dtype}"
            )
        manifest["blobs"].append(
            {"part": part_name, "name": name, "shape": list(arr.shape), "dtype": "<f4"}
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        def write(arcname: str, data: bytes) -> None:
            info = zipfile.ZipInfo(arcname, date_time=_ZERO_TIME)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)

        write("manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        write("metadata.json", json.dumps(ckpt.metadata, sort_keys=True, indent=1).encode())
        for part_name, name, arr in _iter_blobs(ckpt.parts):
            write(
                f"blobs/{part_name}/{name}.bin",
                np.ascontiguousarray(arr, dtype="<f4").tobytes(),
            )
    return path


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint archive, verifying the format version and blob sizes."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "manifest.json" not in names or "metadata.json" not in names:
                raise CheckpointFormatError(f"{path}: not a checkpoint archive (missing manifest)")
            manifest = json.loads(zf.read("manifest.json"))
            version = manifest.get("format_version")
            if version != FORMAT_VERSION:
                raise CheckpointVersionError(
                    f"{path}: checkpoint format version {version} is incompatible "
                    f"with supported version {FORMAT_VERSION}"
                )
            metadata = json.loads(zf.read("metadata.json"))
            parts: dict[str, dict[str, np.ndarray]] = {}
            for record in manifest["blobs"]:
                part, name, shape = record["part"], record["name"], tuple(record["shape"])
                raw = zf.read(f"blobs/{part}/{name}.bin")
                expected = int(np.prod(shape)) * 4
                if len(raw) != expected:
                    raise CheckpointFormatError(
                        f"{path}: blob {part}/{name} truncated "
                        f"({len(raw)} bytes, expected {expected})"
                    )
                arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                parts.setdefault(part, {})[name] = arr
    except zipfile.BadZipFile as exc:
        raise CheckpointFormatError(f"{path}: unreadable archive ({exc})") from exc
    except KeyError as exc:
        raise CheckpointFormatError(f"{path}: archive is missing entry {exc}") from exc
    return Checkpoint(parts=parts, metadata=metadata)


def state_checksums(parts: dict[str, dict[str, np.ndarray]]) -> dict[str, str]:
    """Per-part sha256 over parameter bytes, in sorted parameter order."""
    sums = {}
    for part_name in sorted(parts):
        h = hashlib.sha256()
        for name in sorted(parts[part_name]):
            h.update(name.encode())
            h.update(np.ascontiguousarray(parts[part_name][name], dtype="<f4").tobytes())
        sums[part_name] = h.hexdigest()
    return sums


def state_checksum(parts: dict[str, dict[str, np.ndarray]]) -> str:
    """Single sha256 covering every part."""
    h = hashlib.sha256()
    for part_name, digest in sorted(state_checksums(parts).items()):
        h.update(part_name.encode())
        h.update(digest.encode())
    return h.hexdigest()
