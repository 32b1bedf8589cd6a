"""Bit-exact checkpoint container.

Layout: 8-byte magic ``SRAYCKP1``, little-endian uint32 header length, a
UTF-8 JSON header, then the concatenated raw tensor bytes.  The header
carries ``format_version``, ``model_config_hash``, ``step_count``, the full
``model_config`` dict, and per-tensor records ``{name, dtype, shape,
offset, nbytes}`` with dtype one of ``<f4`` / ``<f8``.  Each parameter is
stored as ``name`` (values) plus ``name.m1`` / ``name.m2`` (Adam moments),
so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import DataError

MAGIC = b"SRAYCKP1"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _entries(named_params):
    for name, p in named_params.items():
        yield name, p.data
        yield f"{name}.m1", p.moment1
        yield f"{name}.m2", p.moment2


def save_checkpoint(path, named_params, step_count, model_config):
    tensors = []
    blobs = []
    offset = 0
    for key, arr in _entries(named_params):
        arr = np.ascontiguousarray(arr)
        code = "<f4" if arr.dtype == np.float32 else "<f8"
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        tensors.append({"name": key, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config_hash": hashlib.sha256(
            json.dumps(model_config, sort_keys=True).encode()).hexdigest()[:16],
        "step_count": int(step_count),
        "model_config": model_config,
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Returns (arrays: dict name -> ndarray, header: dict)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not a semray checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    base = 12 + hlen
    arrays = {}
    for rec in header["tensors"]:
        start = base + rec["offset"]
        raw = data[start:start + rec["nbytes"]]
        arrays[rec["name"]] = np.frombuffer(raw, dtype=_DTYPES[rec["dtype"]]) \
            .reshape(rec["shape"]).copy()
    return arrays, header


def checkpoint_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
