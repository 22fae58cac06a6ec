"""Single-file checkpoints: a JSON manifest followed by raw little-endian
parameter buffers.

Layout: 4-byte magic "TVCK", uint64 LE manifest length, the UTF-8 JSON
manifest, then the concatenated buffers in manifest-entry order. The manifest
records name, shape, dtype, and byte offset (relative to the buffer region)
for every array, plus the model description, step counter, and RNG seed, so
a load reproduces every parameter bit-exactly and training resumes
identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptManifest

MAGIC = b"TVCK"
FORMAT_VERSION = 1

Params = dict[str, np.ndarray]


@dataclass
class Checkpoint:
    params: Params
    adam_m: Params
    adam_v: Params
    step: int
    seed: int
    model: dict
    extra: dict


def _entries(group: str, arrays: Params, offset: int):
    entries = []
    for name in sorted(arrays):
        a = np.asarray(arrays[name])  # not ascontiguousarray: keep 0-d shapes
        dtype = a.dtype.newbyteorder("<").str
        entries.append(
            {
                "group": group,
                "name": name,
                "shape": list(a.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": a.nbytes,
            }
        )
        offset += a.nbytes
    return entries, offset


def save_checkpoint(
    path: str | Path,
    params: Params,
    adam_m: Params,
    adam_v: Params,
    step: int,
    seed: int,
    model: dict,
    extra: dict | None = None,
) -> None:
    groups = {"params": params, "adam_m": adam_m, "adam_v": adam_v}
    entries = []
    offset = 0
    for group, arrays in groups.items():
        got, offset = _entries(group, arrays, offset)
        entries.extend(got)
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "seed": seed,
        "model": model,
        "extra": extra or {},
        "entries": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for group, arrays in groups.items():
            for name in sorted(arrays):
                a = np.asarray(arrays[name])
                fh.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorruptManifest(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CorruptManifest(f"{path}: missing TVCK header")
    (blob_len,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + blob_len:
        raise CorruptManifest(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[12 : 12 + blob_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptManifest(f"{path}: unparseable manifest: {exc}") from exc
    body = raw[12 + blob_len :]
    groups: dict[str, Params] = {"params": {}, "adam_m": {}, "adam_v": {}}
    for entry in manifest.get("entries", []):
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(body):
            raise CorruptManifest(f"{path}: truncated buffer for {entry['name']}")
        arr = np.frombuffer(body[start : start + nbytes], dtype=entry["dtype"]).reshape(
            entry["shape"]
        )
        groups[entry["group"]][entry["name"]] = arr.copy()
    return Checkpoint(
        params=groups["params"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        step=int(manifest["step"]),
        seed=int(manifest["seed"]),
        model=manifest["model"],
        extra=manifest.get("extra", {}),
    )
