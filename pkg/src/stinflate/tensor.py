"""Dense real-valued arrays and the small amount of arithmetic the engine needs.

Tensors are plain ``numpy.ndarray`` objects restricted to ``float32`` or
``float64``, channels-first and C-contiguous (row-major). The helpers here
validate shapes up front instead of relying on broadcasting, which this
package deliberately never uses.

Randomness comes from :class:`Rng`, a thin wrapper over numpy's PCG64 bit
generator. PCG64's output stream is fixed by numpy's stability policy, so a
given seed reproduces the same values on every platform.
"""

from __future__ import annotations

import hashlib
import math
from typing import Sequence

import numpy as np

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)
DTYPES = (F32, F64)

Tensor = np.ndarray


class TensorError(ValueError):
    """Raised for invalid shapes, axes, dtypes or bounds."""


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise TensorError("shape must have at least one dimension")
    if any(s < 1 for s in shape):
        raise TensorError(f"all dimensions must be >= 1, got {shape}")
    return shape


def _check_dtype(dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype not in DTYPES:
        raise TensorError(f"unsupported dtype {dtype}; use float32 or float64")
    return dtype


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise TensorError(f"shape mismatch: {a.shape} vs {b.shape}")


def as_tensor(values, dtype=F64) -> Tensor:
    """Copy ``values`` into a contiguous tensor of the given dtype."""
    t = np.array(values, dtype=_check_dtype(dtype), order="C")
    if t.ndim == 0:
        t = t.reshape(1)
    _check_shape(t.shape)
    if not np.all(np.isfinite(t)):
        raise TensorError("tensor values must be finite")
    return t


def zeros(shape: Sequence[int], dtype=F64) -> Tensor:
    return np.zeros(_check_shape(shape), dtype=_check_dtype(dtype))


def ones(shape: Sequence[int], dtype=F64) -> Tensor:
    return np.ones(_check_shape(shape), dtype=_check_dtype(dtype))


def scale(t: Tensor, a: float) -> Tensor:
    if not math.isfinite(a):
        raise TensorError(f"scale factor must be finite, got {a}")
    return (t * t.dtype.type(a)).astype(t.dtype, copy=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return a - b


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return a * b


def sum_over_axis(t: Tensor, axis: int) -> Tensor:
    """Sum along ``axis``, removing it. Summation runs in index order."""
    if not -t.ndim <= axis < t.ndim:
        raise TensorError(f"axis {axis} out of range for rank {t.ndim}")
    axis %= t.ndim
    # A python-level loop pins the accumulation order (numpy's pairwise
    # summation would otherwise depend on the memory layout).
    moved = np.moveaxis(t, axis, 0)
    out = moved[0].copy()
    for k in range(1, moved.shape[0]):
        out += moved[k]
    if out.ndim == 0:
        out = out.reshape(1)
    return out


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not ts:
        raise TensorError("cannot stack an empty sequence")
    for t in ts[1:]:
        _same_shape(ts[0], t)
    return np.ascontiguousarray(np.stack(ts, axis=axis))


def max_abs_diff(a: Tensor, b: Tensor) -> float:
    _same_shape(a, b)
    return float(np.max(np.abs(a.astype(F64) - b.astype(F64))))


class Rng:
    """Seeded PCG64 stream with named, reproducible sub-streams.

    ``split(name)`` derives a child generator from the parent seed and a
    stable hash of ``name``; it does not consume any state from the parent,
    so adding a new consumer never perturbs existing ones.
    """

    def __init__(self, seed: int = 0):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise TensorError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = seed
        self._path: tuple[int, ...] = ()
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    @classmethod
    def _child(cls, seed: int, path: tuple[int, ...]) -> "Rng":
        rng = cls.__new__(cls)
        rng.seed = seed
        rng._path = path
        ss = np.random.SeedSequence(seed, spawn_key=path)
        rng._gen = np.random.Generator(np.random.PCG64(ss))
        return rng

    def split(self, name: str) -> "Rng":
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        key = int.from_bytes(digest[:4], "little")
        return Rng._child(self.seed, self._path + (key,))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, shape, lo=0.0, hi=1.0) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=shape)

    def normal(self, shape, mean=0.0, std=1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def exponential(self, size) -> np.ndarray:
        return self._gen.standard_exponential(size=size)


def rand_uniform(rng: Rng, shape: Sequence[int], lo: float, hi: float, dtype=F64) -> Tensor:
    if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
        raise TensorError(f"need finite lo < hi, got [{lo}, {hi})")
    shape = _check_shape(shape)
    values = rng.uniform(shape, lo, hi)
    # Downcasting to float32 can round a value up to hi.
    out = values.astype(_check_dtype(dtype))
    hi_cast = out.dtype.type(hi)
    return np.where(out >= hi_cast, np.nextafter(hi_cast, out.dtype.type(lo)), out)


def rand_normal(rng: Rng, shape: Sequence[int], mean: float, std: float, dtype=F64) -> Tensor:
    if not (math.isfinite(mean) and math.isfinite(std)) or std < 0:
        raise TensorError(f"need finite mean and std >= 0, got ({mean}, {std})")
    shape = _check_shape(shape)
    return rng.normal(shape, mean, std).astype(_check_dtype(dtype))
