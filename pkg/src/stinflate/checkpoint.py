"""Bit-exact binary container for a network spec plus named tensors.

Layout (all integers little-endian)::

    magic        4 bytes   b"STCW"
    version      u32       1
    spec_len     u32       byte length of the spec text (0: no spec)
    spec         bytes     UTF-8 NetSpec text (see nn.spec)
    tensor_count u32
    per tensor:
        name_len u32
        name     bytes     UTF-8, [A-Za-z0-9_.]+
        dtype    u8        0 = float32, 1 = float64
        rank     u8        >= 1
        dims     u64[rank] each >= 1
        data     bytes     row-major little-endian IEEE-754 elements

The file must end exactly after the last tensor. Data-only dumps (generated
clips, probability tables) are written with no spec.
"""

from __future__ import annotations

import math
import os
import re
import struct
import tempfile
from typing import Mapping, Optional

import numpy as np

from .nn.net import check_params
from .nn.spec import NetSpec, SpecError, parse_spec

MAGIC = b"STCW"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_NAME = re.compile(r"^[A-Za-z0-9_.]+$")
MAX_RANK = 8


class CheckpointError(ValueError):
    pass


def encode(spec: Optional[NetSpec], tensors: Mapping[str, np.ndarray]) -> bytes:
    if spec is not None:
        try:
            check_params(spec, dict(tensors))
        except ValueError as exc:
            raise CheckpointError(f"params inconsistent with spec: {exc}") from None
    spec_bytes = spec.to_text().encode("utf-8") if spec is not None else b""
    out = [MAGIC, struct.pack("<II", VERSION, len(spec_bytes)), spec_bytes, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        if not _NAME.match(name):
            raise CheckpointError(f"invalid tensor name {name!r}")
        t = np.asarray(t)
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        if t.ndim < 1 or t.ndim > MAX_RANK or 0 in t.shape:
            raise CheckpointError(f"{name}: unsupported shape {t.shape}")
        code = _DTYPE_CODES[t.dtype]
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", code, t.ndim))
        out.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        out.append(np.ascontiguousarray(t, dtype=_CODE_DTYPES[code]).tobytes())
    return b"".join(out)


def write_checkpoint(path, spec: Optional[NetSpec], params: Mapping[str, np.ndarray]) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    payload = encode(spec, params)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".stcw-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n > len(self.buf) - self.pos:
            raise CheckpointError(f"truncated: {what} needs {n} bytes, {len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def decode(buf: bytes):
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    spec_len = r.u32("spec length")
    spec = None
    if spec_len:
        raw = r.take(spec_len, "spec text")
        try:
            spec = parse_spec(raw.decode("utf-8"))
        except (UnicodeDecodeError, SpecError) as exc:
            raise CheckpointError(f"invalid spec text: {exc}") from None
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u32(f"name length of tensor #{i}")
        if name_len == 0:
            raise CheckpointError(f"tensor #{i} has an empty name")
        try:
            name = r.take(name_len, f"name of tensor #{i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor #{i} name is not UTF-8") from None
        if not _NAME.match(name):
            raise CheckpointError(f"tensor #{i} has an invalid name {name!r}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        code = r.u8(f"dtype of {name}")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        rank = r.u8(f"rank of {name}")
        if not 1 <= rank <= MAX_RANK:
            raise CheckpointError(f"{name}: unsupported rank {rank}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name}"))
        if 0 in dims:
            raise CheckpointError(f"{name}: zero-sized dimension in {dims}")
        dtype = _CODE_DTYPES[code]
        remaining = len(buf) - r.pos
        count_el = 1
        for d in dims:
            count_el *= d
            if count_el * dtype.itemsize > remaining:
                raise CheckpointError(f"truncated: data of tensor {name!r} ({dims}) exceeds the file")
        data = r.take(count_el * dtype.itemsize, f"data of tensor {name!r}")
        arr = np.frombuffer(data, dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    if spec is not None:
        try:
            check_params(spec, tensors)
        except ValueError as exc:
            raise CheckpointError(f"tensors inconsistent with spec: {exc}") from None
    return spec, tensors


def read_checkpoint(path):
    """Return ``(spec, tensors)``; ``spec`` is None for data-only dumps."""
    with open(path, "rb") as fh:
        return decode(fh.read())


def header_offsets(buf: bytes) -> list[int]:
    """Byte offsets of every fixed-layout header field in an encoded file.

    Covers magic, version, spec length, tensor count and each tensor's name
    length, dtype, rank and dims; excludes spec text, names and element data.
    """
    offsets = list(range(0, 12))
    spec_len = struct.unpack_from("<I", buf, 8)[0]
    pos = 12 + spec_len
    offsets += range(pos, pos + 4)
    count = struct.unpack_from("<I", buf, pos)[0]
    pos += 4
    for _ in range(count):
        name_len = struct.unpack_from("<I", buf, pos)[0]
        offsets += range(pos, pos + 4)
        pos += 4 + name_len
        rank = buf[pos + 1]
        dtype = _CODE_DTYPES[buf[pos]]
        offsets += range(pos, pos + 2 + 8 * rank)
        dims = struct.unpack_from(f"<{rank}Q", buf, pos + 2)
        pos += 2 + 8 * rank + math.prod(dims) * dtype.itemsize
    return offsets
