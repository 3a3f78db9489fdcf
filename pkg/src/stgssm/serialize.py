"""Binary tensor container, CSV export, and checkpoint files.

Single-tensor container layout (little-endian throughout):

    magic  b"STGT"
    version  u32
    rank     u32
    extents  u64 * rank
    payload  float64 * prod(extents), row-major

A checkpoint is a sequence of named containers followed by a JSON
manifest:

    magic  b"STGC"
    version  u32
    n_tensors  u32
    per tensor: name_len u32, name utf-8 bytes, STGT container
    manifest_len u64, manifest JSON (sorted keys) utf-8 bytes
"""

from __future__ import annotations

import json
import struct

import numpy as np

TENSOR_MAGIC = b"STGT"
CHECKPOINT_MAGIC = b"STGC"
FORMAT_VERSION = 1


def tensor_bytes(arr) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    header = TENSOR_MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return header + extents + arr.astype("<f8").tobytes()


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated tensor container while reading {what}")
    return buf


def read_tensor(f) -> np.ndarray:
    magic = _read_exact(f, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", _read_exact(f, 8, "header"))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor container version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "extents")) if rank else ()
    count = 1
    for s in shape:
        count *= s
    payload = _read_exact(f, 8 * count, "payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def save_tensor(path, arr):
    with open(path, "wb") as f:
        f.write(tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def tensor_to_csv(path, arr):
    """Debug export: one row per flattened index."""
    flat = np.ascontiguousarray(arr, dtype=np.float64).reshape(-1)
    with open(path, "w") as f:
        f.write("index,value\n")
        for i, v in enumerate(flat):
            f.write(f"{i},{float(v)!r}\n")


def manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, tensors: dict, manifest: dict):
    """Write named arrays plus a JSON manifest; byte-deterministic."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(tensor_bytes(arr))
        blob = manifest_bytes(manifest)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)


def load_checkpoint(path):
    """Read back (tensors, manifest) written by save_checkpoint."""
    tensors = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            tensors[name] = read_tensor(f)
        (mlen,) = struct.unpack("<Q", _read_exact(f, 8, "manifest length"))
        manifest = json.loads(_read_exact(f, mlen, "manifest").decode("utf-8"))
    return tensors, manifest
