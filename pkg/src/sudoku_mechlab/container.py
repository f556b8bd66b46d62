"""Flat tensor container used for checkpoints, activation stores and probe banks.

Layout::

    u64 little-endian header length N
    N bytes of UTF-8 JSON: {"config": {...}, "meta": {...},
                            "tensors": {name: {"dtype", "shape", "byte_offset", "byte_len"}}}
    payload: raw little-endian row-major tensor bytes, offsets relative to payload start
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import FormatError

_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "i32": "<i4", "u16": "<u2", "u8": "u1", "bool": "?"}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


def _code(arr: np.ndarray) -> str:
    try:
        return _CODES[arr.dtype.newbyteorder("<").str if arr.dtype.byteorder == ">" else arr.dtype.str]
    except KeyError:
        raise FormatError(f"unsupported dtype {arr.dtype}") from None


def write_container(
    path: str | Path,
    tensors: Mapping[str, np.ndarray],
    config: Mapping[str, Any] | None = None,
    meta: Mapping[str, Any] | None = None,
) -> None:
    entries = {}
    blobs = []
    offset = 0
    for name in tensors:
        arr = np.asarray(tensors[name])
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries[name] = {"dtype": code, "shape": list(arr.shape), "byte_offset": offset, "byte_len": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = {"config": dict(config or {}), "meta": dict(meta or {}), "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise FormatError(f"{path}: truncated header length")
        (n,) = struct.unpack("<Q", head)
        hbytes = fh.read(n)
    if len(hbytes) != n:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(hbytes)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: header is not valid JSON") from exc
    if not isinstance(header, dict) or "tensors" not in header:
        raise FormatError(f"{path}: header lacks a tensor table")
    return header


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, header)``. Any size mismatch raises before anything is returned."""
    data = Path(path).read_bytes()
    header = read_header(path)
    start = 8 + struct.unpack_from("<Q", data, 0)[0]
    payload = len(data) - start
    out = {}
    for name, e in header["tensors"].items():
        dt = np.dtype(_DTYPES.get(e["dtype"], "V"))
        if dt.kind == "V":
            raise FormatError(f"{path}: tensor {name!r} has unknown dtype {e['dtype']!r}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dt.itemsize != e["byte_len"]:
            raise FormatError(f"{path}: tensor {name!r} shape/byte_len disagree")
        if e["byte_offset"] + e["byte_len"] > payload:
            raise FormatError(f"{path}: payload truncated inside tensor {name!r}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=start + e["byte_offset"])
        out[name] = arr.reshape(e["shape"]).copy()
    return out, header
