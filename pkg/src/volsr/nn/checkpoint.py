"""Binary checkpoint format for trained parameter stores.

Layout: an 8-byte magic, a little-endian u32 manifest length, a UTF-8 JSON
manifest, then the raw little-endian float64 payload of every parameter
concatenated in manifest order. The manifest carries the parameter names and
shapes plus free-form hyperparameter, seed, and config records, so a file is
self-describing without any code import.
"""

from __future__ import annotations

import json
import struct
from typing import Any

import numpy as np

from .optim import ParamStore

CKPT_MAGIC = b"VSRCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def save_checkpoint(
    path,
    store: ParamStore,
    hyper: dict[str, Any],
    seed: int,
    config: dict[str, Any] | None = None,
) -> None:
    entries = []
    payloads = []
    for name, t in store.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "params": entries,
        "hyper": hyper,
        "seed": int(seed),
        "config": config if config is not None else {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for chunk in payloads:
            f.write(chunk)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a checkpoint into (arrays-by-name, manifest)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CKPT_MAGIC) + 4 or not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CKPT_MAGIC)
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[off : off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON: {exc}") from exc
    off += mlen
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {manifest.get('format_version')!r}"
        )
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload for parameter {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(
            shape
        ).astype(np.float64)
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes after payload")
    return arrays, manifest


def load_param_store(path, trainable: bool = False) -> tuple[ParamStore, dict[str, Any]]:
    """Read a checkpoint into a ParamStore, preserving parameter order."""
    arrays, manifest = load_checkpoint(path)
    store = ParamStore()
    for name, arr in arrays.items():
        store.add(name, arr, requires_grad=trainable)
    return store, manifest
