"""Versioned parameter checkpoints.

Layout: ``EBSCKPT`` magic, uint32 format version, uint64 header length,
a UTF-8 JSON header, then little-endian float32 blobs in header order.
The header lists each array's name, role, shape, and byte offset.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .params import ParamStore

MAGIC = b"EBSCKPT"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _blobs(store: ParamStore):
    for name in store.names():
        yield name, "param", store.params[name].data
        yield name, "m", store.m[name]
        yield name, "v", store.v[name]


def dumps(store: ParamStore, metadata: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, role, arr in _blobs(store):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "role": role, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": FORMAT_VERSION,
        "step": store.step,
        "arrays": entries,
        "metadata": metadata or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hb)) + hb + b"".join(chunks)


def save_checkpoint(path, store: ParamStore, metadata: dict | None = None) -> str:
    """Write ``store`` to ``path``; returns the sha256 of the file bytes."""
    data = dumps(store, metadata)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, hlen = struct.unpack("<IQ", raw[pos:pos + 12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += 12
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: header version mismatch")
    body = memoryview(raw)[pos + hlen:]
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(body, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        arrays[(e["name"], e["role"])] = a.astype(np.float32)
    return header, arrays


def load_checkpoint(path, store: ParamStore) -> dict:
    """Restore values and Adam state into ``store``; returns the metadata.

    The store must already hold the same parameter names and shapes
    (i.e. be built from the same model config).
    """
    header, arrays = read_checkpoint(path)
    names = [e["name"] for e in header["arrays"] if e["role"] == "param"]
    if set(names) != set(store.names()):
        extra = sorted(set(names) ^ set(store.names()))
        raise CheckpointError(f"{path}: parameter names differ from model: {extra[:4]}")
    for name in names:
        want = store.params[name].shape
        got = arrays[(name, "param")].shape
        if got != want:
            raise CheckpointError(f"{path}: shape mismatch for {name}: file {got}, model {want}")
    for name in names:
        store.params[name].data = arrays[(name, "param")].astype(store.dtype)
        store.m[name] = arrays[(name, "m")].astype(store.dtype)
        store.v[name] = arrays[(name, "v")].astype(store.dtype)
        store.params[name].grad = None
    store.step = int(header["step"])
    return header["metadata"]


def checkpoint_metadata(path) -> dict:
    return read_checkpoint(path)[0]["metadata"]
