"""Rank-4 tensor helpers and the deterministic random number generator.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channel, height, width) in C order, so element ``(i, j, y, x)``
lives at flat offset ``((i*c + j)*h + y)*w + x``.  Only float32 and float64
are accepted; the dtype travels with the array.

``Rng`` wraps the PCG64 (XSL-RR 128/64) bit generator and derives every
floating-point draw from its raw 64-bit output with fixed bit arithmetic, so
streams do not depend on numpy's distribution samplers.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ArgumentError, ShapeError

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

# Extents are stored as u32 in the container format.
MAX_EXTENT = (1 << 32) - 1
MAX_ELEMENTS = 1 << 40


def _check_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in DTYPES:
        raise ArgumentError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


def check_shape(shape) -> tuple[int, int, int, int]:
    """Validate a 4-tuple of extents and return it as plain ints."""
    if len(shape) != 4:
        raise ShapeError(f"expected 4 extents, got {len(shape)}")
    out = tuple(int(s) for s in shape)
    total = 1
    for s in out:
        if s < 1 or s > MAX_EXTENT:
            raise ShapeError(f"extent {s} outside [1, {MAX_EXTENT}]")
        total *= s
    if total > MAX_ELEMENTS:
        raise ShapeError(f"tensor of {total} elements is too large")
    return out  # type: ignore[return-value]


def as_tensor4(x, name: str = "x") -> np.ndarray:
    """Check that ``x`` is a rank-4 float tensor and return it unchanged."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 array, got {getattr(x, 'shape', type(x))}")
    _check_dtype(x.dtype)
    return x


def tensor_new(shape, fill: float = 0.0, dtype=np.float64) -> np.ndarray:
    return np.full(check_shape(shape), fill, dtype=_check_dtype(dtype))


def flat_offset(shape, i: int, j: int, y: int, x: int) -> int:
    _, c, h, w = shape
    return ((i * c + j) * h + y) * w + x


def unravel_offset(shape, offset: int) -> tuple[int, int, int, int]:
    _, c, h, w = shape
    offset, x = divmod(offset, w)
    offset, y = divmod(offset, h)
    i, j = divmod(offset, c)
    return i, j, y, x


def map2(a: np.ndarray, b: np.ndarray, f: Callable) -> np.ndarray:
    """Apply a binary elementwise function to two same-shape tensors."""
    as_tensor4(a, "a")
    as_tensor4(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch {a.dtype} vs {b.dtype}")
    return np.asarray(f(a, b), dtype=a.dtype)


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class Rng:
    """Seeded PCG64 stream with platform-independent float conversion.

    ``child(key)`` derives an independent generator from ``(seed, key)`` so
    that callers can partition the seed space by name (layer names, sample
    indices) instead of by draw order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self._bits = np.random.PCG64(self.seed)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"

    def child(self, key) -> "Rng":
        return Rng(splitmix64(self.seed ^ fnv1a64(str(key).encode("utf-8"))))

    def raw(self, size: int) -> np.ndarray:
        return self._bits.random_raw(int(size)).astype(np.uint64, copy=False)

    def random(self, size: int, dtype=np.float64) -> np.ndarray:
        """Uniform draws in [0, 1): top 53 (or 24) bits scaled by a power of two."""
        dt = _check_dtype(dtype)
        r = self.raw(size)
        if dt == np.float64:
            return (r >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        return ((r >> np.uint64(40)).astype(np.float64) * (2.0**-24)).astype(np.float32)

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0, dtype=np.float64) -> np.ndarray:
        if not lo < hi:
            raise ArgumentError(f"uniform needs lo < hi, got [{lo}, {hi})")
        dt = _check_dtype(dtype)
        shape = tuple(int(s) for s in shape)
        u = self.random(int(np.prod(shape, dtype=np.int64)), dt).reshape(shape)
        lo_, hi_ = dt.type(lo), dt.type(hi)
        out = lo_ + (hi_ - lo_) * u
        # rounding can land on hi when (hi - lo) is not a power of two
        return np.where(out >= hi_, np.nextafter(hi_, lo_), out).astype(dt, copy=False)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        """Box-Muller transform on pairs of 53-bit uniforms."""
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1], keeps log finite
        u2 = self.random(m)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2.0 * np.pi * u2), rad * np.sin(2.0 * np.pi * u2)])[:n]
        return (mean + std * z).reshape(shape).astype(_check_dtype(dtype))

    def integers(self, lo: int, hi: int, size: int | None = None):
        """Integers in [lo, hi) by multiply-shift on 32 high bits."""
        if not lo < hi:
            raise ArgumentError(f"integers needs lo < hi, got [{lo}, {hi})")
        span = hi - lo
        if span > 1 << 32:
            raise ArgumentError("integer span above 2**32 is not supported")
        r = self.raw(1 if size is None else size) >> np.uint64(32)
        vals = lo + ((r * np.uint64(span)) >> np.uint64(32)).astype(np.int64)
        return int(vals[0]) if size is None else vals

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.raw(n), kind="stable")


def rng_uniform(rng: Rng, shape, lo: float = 0.0, hi: float = 1.0, dtype=np.float64) -> np.ndarray:
    return rng.uniform(check_shape(shape), lo, hi, dtype)
