"""Checkpoint container: one human-readable manifest, then raw float64 data.

Layout: a magic line naming the format version, one line of JSON holding
everything small (config, counters, RNG states, and a directory of array
names with shapes, in sorted name order), then the arrays' bytes
concatenated in directory order as little-endian float64. Loading parses
and verifies the whole file before returning anything, so a truncated or
padded file is rejected without any state having been touched. Writes go
through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os

import numpy as np

MAGIC = "lagma-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is unreadable, inconsistent, or the wrong version."""


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write meta plus named arrays; byte-deterministic for equal contents."""
    directory = []
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        directory.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    manifest = json.dumps({"meta": meta, "arrays": directory},
                          sort_keys=True, separators=(",", ":"))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC} {CHECKPOINT_VERSION}\n".encode("ascii"))
        fh.write(manifest.encode("utf-8"))
        fh.write(b"\n")
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and fully verify a checkpoint; returns (meta, arrays by name)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic_end = raw.find(b"\n")
    if magic_end < 0:
        raise CheckpointError(f"{path}: not a checkpoint (no header line)")
    head = raw[:magic_end].decode("ascii", errors="replace").split()
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if head[1] != str(CHECKPOINT_VERSION):
        raise CheckpointError(
            f"{path}: file is format version {head[1]}, this build reads "
            f"version {CHECKPOINT_VERSION}"
        )
    manifest_end = raw.find(b"\n", magic_end + 1)
    if manifest_end < 0:
        raise CheckpointError(f"{path}: truncated inside the manifest")
    try:
        manifest = json.loads(raw[magic_end + 1:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from exc
    if not isinstance(manifest, dict) or "meta" not in manifest \
            or "arrays" not in manifest:
        raise CheckpointError(f"{path}: manifest is missing required fields")

    blob = raw[manifest_end + 1:]
    expected = 0
    for entry in manifest["arrays"]:
        count = 1
        for dim in entry["shape"]:
            count *= int(dim)
        expected += count * 8
    if len(blob) != expected:
        raise CheckpointError(
            f"{path}: array data holds {len(blob)} bytes, manifest "
            f"declares {expected} (truncated or corrupt)"
        )
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["arrays"]:
        shape = tuple(int(dim) for dim in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = data.reshape(shape).copy()
        offset += count * 8
    return manifest["meta"], arrays
