"""VOXCAL01 checkpoint container.

Layout: 8 magic bytes, a little-endian u64 manifest length, a UTF-8 JSON
manifest, then the raw little-endian f32 payload.  Manifest offsets are
relative to the start of the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VOXCAL01"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a VOXCAL01 checkpoint")
    (n,) = struct.unpack_from("<Q", buf, 8)
    manifest = json.loads(buf[16 : 16 + n].decode("utf-8"))
    base = 16 + n
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f32":
            raise ValueError(f"{path}: unsupported dtype {e['dtype']}")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=base + e["offset"])
        tensors[e["name"]] = arr.reshape(tuple(e["shape"])).astype(np.float32)
    return tensors, manifest.get("meta", {})
