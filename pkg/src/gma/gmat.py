"""GMAT binary tensor files and named-tensor checkpoint containers.

Tensor layout::

    b"GMAT" | u8 version=1 | u8 dtype (1 = f64 LE) | u8 rank | rank x u64 LE dims | payload

Checkpoint layout::

    b"GMCK" | u8 version=1 | u32 LE count | count x (u32 LE name length | utf-8 name |
    u64 LE byte length | GMAT tensor bytes)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from gma.errors import FormatError

MAGIC = b"GMAT"
CKPT_MAGIC = b"GMCK"
VERSION = 1
DTYPE_F64 = 1


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim > 255:
        raise FormatError("rank above 255 cannot be stored")
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated GMAT data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor_from(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != MAGIC:
        raise FormatError("bad GMAT magic")
    version, dtype, rank = struct.unpack("<BBB", _read_exact(fh, 3))
    if version != VERSION:
        raise FormatError(f"unsupported GMAT version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported GMAT dtype code {dtype}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def tensor_from_bytes(data: bytes) -> np.ndarray:
    fh = io.BytesIO(data)
    arr = read_tensor_from(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after GMAT tensor")
    return arr


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    try:
        return tensor_from_bytes(Path(path).read_bytes())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def checkpoint_to_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = bytearray(CKPT_MAGIC + struct.pack("<BI", VERSION, len(tensors)))
    for name in sorted(tensors):
        raw_name = name.encode("utf-8")
        body = tensor_to_bytes(tensors[name])
        out += struct.pack("<I", len(raw_name)) + raw_name
        out += struct.pack("<Q", len(body)) + body
    return bytes(out)


def checkpoint_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    fh = io.BytesIO(data)
    if _read_exact(fh, 4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, count = struct.unpack("<BI", _read_exact(fh, 5))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, name_len).decode("utf-8")
        (body_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        out[name] = tensor_from_bytes(_read_exact(fh, body_len))
    if fh.read(1):
        raise FormatError("trailing bytes after checkpoint")
    return out


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return checkpoint_from_bytes(data)
