"""Checkpoint files.

Layout: ``b"DGAD"``, uint32 version, uint32 header length, UTF-8 JSON header,
then raw little-endian tensor payloads in header order. Each header entry
records name, shape, dtype (``f4`` or ``f8``), payload offset, byte count and
CRC-32.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from typing import Dict, Tuple, Union

import numpy as np
import torch

MAGIC = b"DGAD"
VERSION = 1
_DTYPES = {torch.float32: "f4", torch.float64: "f8"}
_NP = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}

PathLike = Union[str, os.PathLike]


class CheckpointError(ValueError):
    pass


def write_checkpoint(path: PathLike, tensors: Dict[str, torch.Tensor], meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {t.dtype}")
        code = _DTYPES[t.dtype]
        raw = t.detach().cpu().contiguous().numpy().astype(_NP[code], copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": code, "offset": offset,
                        "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_checkpoint(path: PathLike) -> Tuple[Dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a DGAD checkpoint")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    if len(buf) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    base = 12 + hlen
    out: Dict[str, torch.Tensor] = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = buf[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']!r}")
        if zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch for {e['name']!r}")
        arr = np.frombuffer(raw, dtype=_NP[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy())
    expected_end = base + sum(e["nbytes"] for e in header["tensors"])
    if len(buf) != expected_end:
        raise CheckpointError(f"{path}: {len(buf) - expected_end} unexpected trailing bytes")
    return out, header["meta"]
