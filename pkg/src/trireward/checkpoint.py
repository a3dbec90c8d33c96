"""Deterministic binary checkpoint container for named parameter arrays.

Layout: 8-byte magic, u32 header length, JSON header, raw array data.
The header lists arrays sorted by name with dtype/shape/offset and a sha256
of the data section, so identical inputs always produce identical bytes
(unlike zip-based containers, which embed timestamps).
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ConfigError, ContractViolation

_MAGIC = b"TRWCKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write named float arrays plus a JSON-serializable meta dict."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        if arr.dtype.kind not in "fiu":
            raise ContractViolation(f"{name}: unsupported dtype {arr.dtype}")
        buf = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str.replace(">", "<").replace("=", "<"),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(buf),
            }
        )
        chunks.append(buf)
        offset += len(buf)
    data = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "arrays": entries,
        "data_sha256": hashlib.sha256(data).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(data)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint back as (params, meta); verifies the data checksum."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version")
    data = blob[12 + hlen :]
    if hashlib.sha256(data).hexdigest() != header["data_sha256"]:
        raise ConfigError(f"{path}: checkpoint data corrupted (checksum mismatch)")
    params = {}
    for e in header["arrays"]:
        raw = data[e["offset"] : e["offset"] + e["nbytes"]]
        params[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return params, header["meta"]


def checkpoint_meta(path) -> dict:
    """Read only the meta dict (cheap provenance checks)."""
    with open(path, "rb") as f:
        head = f.read(12)
        if head[:8] != _MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", head[8:12])
        header = json.loads(f.read(hlen))
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version")
    return header["meta"]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def params_sha256(params: dict) -> str:
    """Content hash of a named parameter set (order-insensitive)."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()


def assign_params(target: dict, loaded: dict) -> None:
    """Copy loaded arrays into existing parameter arrays, shape-checked."""
    missing = sorted(set(target) - set(loaded))
    extra = sorted(set(loaded) - set(target))
    if missing or extra:
        raise ConfigError(f"parameter name mismatch: missing={missing} extra={extra}")
    for name, arr in target.items():
        if loaded[name].shape != arr.shape:
            raise ConfigError(f"{name}: shape {loaded[name].shape} != expected {arr.shape}")
        arr[...] = loaded[name]
