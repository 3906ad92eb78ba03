"""Gate checkpoint files.

Layout::

    b"SAGC" | u32 header_len | header_len bytes of UTF-8 JSON | SATR record w_q | SATR record w_k

The JSON header carries ``version`` and the ModelShape; unknown keys are
ignored so newer writers stay readable.
"""

from __future__ import annotations

import io
import json
import os
import struct

from .errors import CheckpointError, CheckpointVersionError, TensorFormatError
from .gate import GateParams
from .tensor import ModelShape
from .tensorio import read_tensor, write_tensor

MAGIC = b"SAGC"
VERSION = 1


def save_checkpoint(params: GateParams, path: str | os.PathLike, shape: ModelShape, **extra) -> None:
    params.check(shape)
    header = {"version": VERSION, "shape": shape.to_dict(), "tensors": ["w_q", "w_k"], **extra}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(raw)) + raw)
        write_tensor(fh, params.w_q)
        write_tensor(fh, params.w_k)


def read_checkpoint(path: str | os.PathLike) -> tuple[GateParams, ModelShape, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: corrupt header (missing magic)")
    (n,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + n:
        raise CheckpointError(f"{path}: corrupt header (truncated)")
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if not isinstance(header, dict) or "version" not in header or "shape" not in header:
        raise CheckpointError(f"{path}: corrupt header (missing fields)")
    if header["version"] != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {header['version']}, expected {VERSION}")
    shape = ModelShape.from_dict(header["shape"])
    body = io.BytesIO(data[8 + n :])
    try:
        params = GateParams(read_tensor(body), read_tensor(body))
    except TensorFormatError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    params.check(shape)
    return params, shape, header


def load_checkpoint(path: str | os.PathLike) -> GateParams:
    return read_checkpoint(path)[0]
