"""Binary tensor dumps.

Layout of one record, all integers little-endian::

    b"SATR" | u32 version (=1) | u32 rank | rank x u64 dims | f32 payload

A file may hold several records back to back.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Iterable, List

import numpy as np

from .errors import TensorFormatError

MAGIC = b"SATR"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def write_tensor(fh: BinaryIO, tensor) -> None:
    arr = np.asarray(tensor, dtype="<f4", order="C")
    fh.write(_HEADER.pack(MAGIC, VERSION, arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TensorFormatError(f"truncated tensor dump while reading {what}")
    return data


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic, version, rank = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor dump version {version}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "dims")) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def read_tensors(fh: BinaryIO) -> List[np.ndarray]:
    buf = io.BytesIO(fh.read())
    size = len(buf.getbuffer())
    out = []
    while buf.tell() < size:
        out.append(read_tensor(buf))
    return out


def save_tensors(path: str | os.PathLike, tensors: Iterable) -> None:
    with open(path, "wb") as fh:
        for t in tensors:
            write_tensor(fh, t)


def save_tensor(path: str | os.PathLike, tensor) -> None:
    save_tensors(path, [tensor])


def load_tensors(path: str | os.PathLike) -> List[np.ndarray]:
    with open(path, "rb") as fh:
        tensors = read_tensors(fh)
    if not tensors:
        raise TensorFormatError(f"{path}: empty tensor dump")
    return tensors


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    return load_tensors(path)[0]
