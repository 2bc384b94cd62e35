"""Differentiable primitives: pooling, 1x1 convolution, batch norm, ReLU.

Every forward returns what its backward needs; nothing is recomputed.
Pooling works on non-overlapping k x k windows (stride == k).  Extent
mismatches are an error unless ``pad=True``, in which case the bottom/right
border is filled with a sentinel that can never be selected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateBatchError, ShapeError, UsageError
from .tensor import as_tensor4

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class PoolIndices:
    """Argmin/argmax per output cell as a flat offset inside its channel plane."""

    idx: np.ndarray  # (n, c, h_out, w_out) int64
    input_shape: tuple[int, int, int, int]
    k: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.idx.shape


@dataclass
class Conv1x1Params:
    weight: np.ndarray  # (c_out, c_in)
    bias: np.ndarray  # (c_out,)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def init(cls, c: int, dtype=np.float64, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        return cls(
            gamma=np.ones(c, dtype),
            beta=np.zeros(c, dtype),
            running_mean=np.zeros(c, dtype),
            running_var=np.ones(c, dtype),
            eps=eps,
            momentum=momentum,
        )


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool
    extras: dict = field(default_factory=dict)


# -- pooling -----------------------------------------------------------------


def _check_k(k: int) -> int:
    if int(k) != k or k < 1:
        raise ArgumentError(f"window size must be a positive integer, got {k}")
    return int(k)


def _windows(x: np.ndarray, k: int, pad: bool, fill) -> np.ndarray:
    """View x as (n, c, h/k, w/k, k*k) with each window flattened row-major."""
    n, c, h, w = x.shape
    if h % k or w % k:
        if not pad:
            raise ShapeError(f"spatial extent {h}x{w} not divisible by window {k}")
        hp, wp = -(-h // k) * k, -(-w // k) * k
        padded = np.full((n, c, hp, wp), fill, dtype=x.dtype)
        padded[:, :, :h, :w] = x
        x, h, w = padded, hp, wp
    return x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)


def _extreme_pool(x: np.ndarray, k: int, pad: bool, largest: bool):
    as_tensor4(x)
    k = _check_k(k)
    info = np.finfo(x.dtype)
    win = _windows(x, k, pad, info.min if largest else info.max)
    # argmin/argmax return the first extremum, i.e. row-major tie breaking
    arg = win.argmax(axis=-1) if largest else win.argmin(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    ho, wo = out.shape[2:]
    dy, dx = np.divmod(arg, k)
    rows = np.arange(ho)[:, None] * k + dy
    cols = np.arange(wo)[None, :] * k + dx
    idx = (rows * x.shape[3] + cols).astype(np.int64)
    return np.ascontiguousarray(out), PoolIndices(idx, tuple(x.shape), k)


def min_pool2d(x: np.ndarray, k: int = 2, pad: bool = False):
    """Window minimum; returns (values, PoolIndices)."""
    return _extreme_pool(x, k, pad, largest=False)


def max_pool2d(x: np.ndarray, k: int = 2, pad: bool = False):
    """Window maximum; returns (values, PoolIndices)."""
    return _extreme_pool(x, k, pad, largest=True)


def avg_pool2d(x: np.ndarray, k: int = 2, pad: bool = False) -> np.ndarray:
    """Window mean, accumulated left to right in row-major window order.

    With ``pad=True`` partial border windows average their valid elements only.
    """
    as_tensor4(x)
    k = _check_k(k)
    win = _windows(x, k, pad, 0)
    acc = win[..., 0].copy()
    for t in range(1, k * k):
        acc += win[..., t]
    n, c, h, w = x.shape
    if h % k == 0 and w % k == 0:
        return acc / x.dtype.type(k * k)
    ones = _windows(np.ones((1, 1, h, w), x.dtype), k, True, 0).sum(axis=-1)
    return acc / ones


def avg_pool_backward(grad_out: np.ndarray, input_shape, k: int = 2) -> np.ndarray:
    n, c, h, w = input_shape
    if h % k or w % k:
        raise ShapeError("avg_pool_backward supports divisible extents only")
    if grad_out.shape != (n, c, h // k, w // k):
        raise ShapeError(f"grad shape {grad_out.shape} does not match pooled {(n, c, h // k, w // k)}")
    g = grad_out / grad_out.dtype.type(k * k)
    return np.repeat(np.repeat(g, k, axis=2), k, axis=3)


def pool_backward(grad_out: np.ndarray, indices: PoolIndices, input_shape=None, out=None) -> np.ndarray:
    """Route each pooled gradient to its recorded source element.

    Gradients are added into ``out`` when given, so several index sets can be
    accumulated into one buffer.
    """
    if grad_out.shape != indices.shape:
        raise ShapeError(f"grad shape {grad_out.shape} does not match indices {indices.shape}")
    shape = tuple(input_shape) if input_shape is not None else indices.input_shape
    if tuple(shape) != tuple(indices.input_shape):
        raise ShapeError(f"input shape {shape} does not match indices {indices.input_shape}")
    n, c, h, w = shape
    if out is None:
        out = np.zeros(shape, dtype=grad_out.dtype)
    elif out.shape != shape:
        raise ShapeError(f"accumulator shape {out.shape} != {shape}")
    planes = out.reshape(n * c, h * w)
    src = indices.idx.reshape(n * c, -1)
    rows = np.arange(n * c)[:, None]
    # windows do not overlap, so offsets within one index set are unique
    planes[rows, src] += grad_out.reshape(n * c, -1)
    return out


# -- 1x1 convolution ---------------------------------------------------------


def conv1x1_forward(x: np.ndarray, p: Conv1x1Params) -> np.ndarray:
    as_tensor4(x)
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(f"input has {c} channels, conv expects {p.c_in}")
    y = np.matmul(p.weight, x.reshape(n, c, h * w)) + p.bias[:, None]
    return y.reshape(n, p.c_out, h, w)


def conv1x1_backward(grad_out: np.ndarray, x: np.ndarray, p: Conv1x1Params):
    n, c, h, w = x.shape
    if grad_out.shape != (n, p.c_out, h, w) or c != p.c_in:
        raise ShapeError(f"grad {grad_out.shape} inconsistent with input {x.shape} and conv {p.weight.shape}")
    g = grad_out.reshape(n, p.c_out, h * w)
    xs = x.reshape(n, c, h * w)
    grad_x = np.matmul(p.weight.T, g).reshape(x.shape)
    grad_w = g.transpose(1, 0, 2).reshape(p.c_out, -1) @ xs.transpose(1, 0, 2).reshape(c, -1).T
    grad_b = g.sum(axis=(0, 2))
    return grad_x, grad_w, grad_b


# -- batch normalization -----------------------------------------------------


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, training: bool = True):
    """Per-channel normalization; training mode also updates running stats in place.

    The batch variance is the biased estimator, the running variance is fed
    the unbiased one.
    """
    as_tensor4(x)
    n, c, h, w = x.shape
    if p.gamma.shape != (c,):
        raise ShapeError(f"input has {c} channels, batch norm has {p.gamma.shape[0]}")
    dt = x.dtype.type
    if training:
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError("batch norm in training mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        mom = dt(p.momentum)
        p.running_mean[...] = (1 - mom) * p.running_mean + mom * mean
        p.running_var[...] = (1 - mom) * p.running_var + mom * var * dt(m / (m - 1))
    else:
        mean, var = p.running_mean, p.running_var
    inv_std = (1 / np.sqrt(var + dt(p.eps))).astype(x.dtype)
    xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
    y = p.gamma[:, None, None] * xhat + p.beta[:, None, None]
    return y, BatchNormCache(xhat=xhat, inv_std=inv_std, gamma=p.gamma, training=training)


def batchnorm_backward(grad_out: np.ndarray, cache: BatchNormCache):
    if not cache.training:
        raise UsageError("batch norm backward needs a training-mode cache")
    if grad_out.shape != cache.xhat.shape:
        raise ShapeError(f"grad {grad_out.shape} does not match cached {cache.xhat.shape}")
    n, _, h, w = grad_out.shape
    m = n * h * w
    xhat = cache.xhat
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    dxhat = grad_out * cache.gamma[:, None, None]
    s1 = dxhat.sum(axis=(0, 2, 3))[:, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[:, None, None]
    grad_x = (cache.inv_std / m)[:, None, None] * (m * dxhat - s1 - xhat * s2)
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# -- ReLU --------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, x.dtype.type(0))


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad {grad_out.shape} does not match input {x.shape}")
    return np.where(x > 0, grad_out, grad_out.dtype.type(0))


# -- 2x2 stride-2 convolution (baseline downsampler) -------------------------


def _check_strided(x: np.ndarray, weight: np.ndarray):
    as_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"strided conv needs even extents, got {h}x{w}")
    if weight.ndim != 4 or weight.shape[1:] != (c, 2, 2):
        raise ShapeError(f"weight {weight.shape} incompatible with {c} input channels")


def strided_conv_downsample(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """2x2 cross-correlation with stride 2.

    Terms are summed in (channel, dy, dx) order before the bias is added, the
    same order as the nested-loop reference, so results match it bit for bit.
    """
    _check_strided(x, weight)
    n, c, h, w = x.shape
    c_out = weight.shape[0]
    acc = np.zeros((n, c_out, h // 2, w // 2), dtype=x.dtype)
    for j in range(c):
        for dy in range(2):
            for dx in range(2):
                acc += weight[None, :, j, dy, dx, None, None] * x[:, j : j + 1, dy::2, dx::2]
    if bias is not None:
        acc += bias[None, :, None, None]
    return acc


def strided_conv_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray):
    _check_strided(x, weight)
    n, c, h, w = x.shape
    if grad_out.shape != (n, weight.shape[0], h // 2, w // 2):
        raise ShapeError(f"grad {grad_out.shape} inconsistent with strided conv output")
    grad_x = np.zeros_like(x)
    grad_w = np.zeros_like(weight)
    for dy in range(2):
        for dx in range(2):
            xs = x[:, :, dy::2, dx::2]
            grad_w[:, :, dy, dx] = np.einsum("nohw,nchw->oc", grad_out, xs)
            grad_x[:, :, dy::2, dx::2] = np.einsum("oc,nohw->nchw", weight[:, :, dy, dx], grad_out)
    return grad_x, grad_w, grad_out.sum(axis=(0, 2, 3))
