"""TNSR binary tensor container and the multi-tensor checkpoint file built on it.

TNSR layout (little-endian throughout):

    bytes 0..3   magic b"TNSR"
    byte  4      version, 0x01
    byte  5      dtype: 0 = float32, 1 = int8, 2 = float64
    byte  6      rank
    bytes 7..9   reserved, zero
    then         rank u32 extents
    then         payload, row-major, last axis fastest

A checkpoint file is a u32 manifest length, a UTF-8 JSON manifest, then
concatenated TNSR records. Manifest entries map a name to the byte offset of
its record relative to the end of the manifest.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

MAGIC = b"TNSR"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int8): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def dumps(arr: np.ndarray) -> bytes:
    """Serialize an array to TNSR bytes."""
    dt = np.dtype(arr.dtype)
    if dt not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; TNSR holds float32, int8, float64")
    header = MAGIC + bytes([VERSION, _DTYPE_CODES[dt], arr.ndim, 0, 0, 0])
    extents = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr).astype(dt.newbyteorder("<")).tobytes()
    return header + extents + payload


def loads(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TNSR record at ``offset``; returns (array, bytes consumed)."""
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError("bad magic: not a TNSR record")
    version, dtype_code, rank = buf[offset + 4], buf[offset + 5], buf[offset + 6]
    if version != VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise FormatError(f"unknown TNSR dtype code {dtype_code}")
    if buf[offset + 7 : offset + 10] != b"\x00\x00\x00":
        raise FormatError("reserved TNSR bytes are nonzero")
    pos = offset + 10
    shape = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    dt = _CODE_DTYPES[dtype_code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = count * dt.itemsize
    arr = np.frombuffer(buf, dtype=dt.newbyteorder("<"), count=count, offset=pos)
    arr = arr.astype(dt).reshape(shape)
    return arr, pos + nbytes - offset


def write_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    _atomic_write(path, dumps(arr))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = loads(fh.read())
    return arr


def write_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray],
                     meta: dict | None = None) -> None:
    """Write named tensors as one checkpoint file (JSON manifest + TNSR records)."""
    records = []
    offsets = {}
    pos = 0
    for name, arr in tensors.items():
        blob = dumps(arr)
        offsets[name] = {"offset": pos, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        records.append(blob)
        pos += len(blob)
    doc = {"version": 1, "tensors": offsets}
    if meta is not None:
        doc["meta"] = meta
    manifest = json.dumps(doc, sort_keys=True).encode()
    _atomic_write(path, struct.pack("<I", len(manifest)) + manifest + b"".join(records))


def read_checkpoint_meta(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read(4)
        (mlen,) = struct.unpack("<I", buf)
        return json.loads(fh.read(mlen).decode()).get("meta", {})


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    (mlen,) = struct.unpack_from("<I", buf, 0)
    manifest = json.loads(buf[4 : 4 + mlen].decode())
    if manifest.get("version") != 1:
        raise FormatError(f"unsupported checkpoint version {manifest.get('version')!r}")
    base = 4 + mlen
    out = {}
    for name, entry in manifest["tensors"].items():
        arr, _ = loads(buf, base + entry["offset"])
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"manifest/record shape mismatch for {name}")
        out[name] = arr
    return out


def _atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tnsr-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
