"""Naive nested-loop references for the pooling and strided-conv kernels.

These are deliberately written element by element with no numpy reductions,
and serve as the oracles for tests and the ``bench`` command.  float64 inputs
are converted to Python floats (IEEE double); float32 inputs are accumulated
as numpy float32 scalars so the rounding matches single precision.
"""

from __future__ import annotations

import numpy as np


def _scalars(x: np.ndarray):
    return x.tolist() if x.dtype == np.float64 else x


def naive_pool(x: np.ndarray, k: int, mode: str):
    """Return (values, indices) for mode in {"min", "max"}; values only for "avg"."""
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    src = _scalars(x)
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    area = x.dtype.type(k * k) if x.dtype == np.float32 else float(k * k)
    for i in range(n):
        for j in range(c):
            plane = src[i][j]
            for oy in range(ho):
                for ox in range(wo):
                    best = None
                    best_at = -1
                    acc = None
                    for dy in range(k):
                        row = plane[oy * k + dy]
                        for dx in range(k):
                            v = row[ox * k + dx]
                            if mode == "avg":
                                acc = v if acc is None else acc + v
                            elif best is None or (v < best if mode == "min" else v > best):
                                best, best_at = v, (oy * k + dy) * w + ox * k + dx
                    if mode == "avg":
                        out[i, j, oy, ox] = acc / area
                    else:
                        out[i, j, oy, ox] = best
                        idx[i, j, oy, ox] = best_at
    if mode == "avg":
        return out
    return out, idx


def naive_min_pool(x: np.ndarray, k: int = 2):
    return naive_pool(x, k, "min")


def naive_max_pool(x: np.ndarray, k: int = 2):
    return naive_pool(x, k, "max")


def naive_avg_pool(x: np.ndarray, k: int = 2) -> np.ndarray:
    return naive_pool(x, k, "avg")


def naive_strided_conv(x: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    n, c, h, w = x.shape
    c_out = weight.shape[0]
    xs, ws = _scalars(x), _scalars(weight)
    out = np.empty((n, c_out, h // 2, w // 2), dtype=x.dtype)
    for i in range(n):
        for o in range(c_out):
            for oy in range(h // 2):
                for ox in range(w // 2):
                    acc = x.dtype.type(0) if x.dtype == np.float32 else 0.0
                    for j in range(c):
                        for dy in range(2):
                            for dx in range(2):
                                acc = acc + ws[o][j][dy][dx] * xs[i][j][2 * oy + dy][2 * ox + dx]
                    if bias is not None:
                        acc = acc + bias[o]
                    out[i, o, oy, ox] = acc
    return out
