"""ECNN1 model files.

Layout, all integers little-endian::

    b"ECNN1" | u32 version | u32 header_len | header JSON (utf-8)
    | parameter blocks (f32 or f64, little-endian, header order)
    | sha256 of everything before it (32 bytes)

The header carries the architecture, dtype, the ordered block manifest,
history and provenance.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelGraph, model_from_architecture

MAGIC = b"ECNN1"
VERSION = 1
_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}


class ModelFileError(ValueError):
    pass


class ChecksumError(ModelFileError):
    pass


class VersionError(ModelFileError):
    pass


def _dtype_tag(dtype) -> str:
    return {np.dtype(np.float32): "f32le", np.dtype(np.float64): "f64le"}[np.dtype(dtype)]


def dumps_model(model: ModelGraph) -> bytes:
    tag = _dtype_tag(model.dtype)
    blocks = [("param", k, p) for k, p in model.named_params()] + \
             [("state", k, s) for k, s in model.named_state()]
    header = {
        "architecture": model.architecture(),
        "dtype": tag,
        "blocks": [{"kind": kind, "layer": i, "name": n, "shape": list(a.shape)} for kind, (i, n), a in blocks],
        "history": model.history,
        "provenance": model.provenance,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    body += [np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes() for _, _, a in blocks]
    raw = b"".join(body)
    return raw + hashlib.sha256(raw).digest()


def loads_model(raw: bytes) -> ModelGraph:
    if not raw.startswith(MAGIC):
        raise ModelFileError("not an ECNN1 model file (bad magic)")
    if len(raw) < len(MAGIC) + 8 + 32:
        raise ChecksumError("model file truncated: checksum failure")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError("model file checksum failure (truncated or corrupted)")
    version, hlen = struct.unpack_from("<II", payload, len(MAGIC))
    if version != VERSION:
        raise VersionError(f"model file version {version} not supported (expected {VERSION})")
    off = len(MAGIC) + 8
    header = json.loads(payload[off:off + hlen].decode())
    off += hlen
    dt = _DTYPES[header["dtype"]]
    model = model_from_architecture(header["architecture"], dtype=dt.newbyteorder("="))
    for blk in header["blocks"]:
        shape = tuple(blk["shape"])
        n = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(payload, dtype=dt, count=n // dt.itemsize, offset=off).reshape(shape)
        off += n
        layer = model.layers[blk["layer"]]
        target = layer.params if blk["kind"] == "param" else layer.state
        if target[blk["name"]].shape != shape:
            raise ModelFileError(f"block {blk['layer']}.{blk['name']} has shape {shape}, "
                                 f"architecture expects {target[blk['name']].shape}")
        target[blk["name"]] = arr.astype(model.dtype)
    if off != len(payload):
        raise ModelFileError(f"{len(payload) - off} trailing bytes after parameter blocks")
    model.history = header["history"]
    model.provenance = header["provenance"]
    return model


def save_model(model: ModelGraph, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_model(model))
    return path


def load_model(path) -> ModelGraph:
    return loads_model(Path(path).read_bytes())
