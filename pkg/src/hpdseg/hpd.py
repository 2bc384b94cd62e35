"""Hybrid pooling downsampling: min+max window fusion, then 1x1 conv, BN, ReLU.

Encoding stage: each k x k window is summarised by ``min + max`` (``sum``
fusion) or by the min and max maps stacked along channels (``concat``).
Learning stage: a 1x1 convolution remixes channels, followed by batch norm
and ReLU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ArgumentError, ShapeError, UsageError
from .ops import BatchNormParams, Conv1x1Params, PoolIndices
from .tensor import Rng, as_tensor4

FUSIONS = ("sum", "concat")


@dataclass
class HpdParams:
    conv: Conv1x1Params
    bn: BatchNormParams
    fusion: str = "sum"

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ArgumentError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.conv.c_out != self.bn.gamma.shape[0]:
            raise ShapeError("conv output width and batch-norm width differ")

    @property
    def c_in(self) -> int:
        """Channels of the tensor fed to the module (before fusion)."""
        return self.conv.c_in // 2 if self.fusion == "concat" else self.conv.c_in

    @property
    def c_out(self) -> int:
        return self.conv.c_out


@dataclass
class HpdCache:
    idx_min: PoolIndices
    idx_max: PoolIndices
    fused: np.ndarray  # conv input
    bn_cache: ops.BatchNormCache
    pre_relu: np.ndarray
    fusion: str
    training: bool
    weight_shape: tuple[int, int]


def conv_init(rng: Rng, c_out: int, fan_in: int, shape=None, dtype=np.float64) -> np.ndarray:
    """Uniform in +-sqrt(3 / fan_in), i.e. unit-variance output for unit-variance input."""
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(shape or (c_out, fan_in), -bound, bound, dtype)


def init_hpd(c_in: int, c_out: int, rng: Rng, fusion: str = "sum", dtype=np.float64) -> HpdParams:
    width = 2 * c_in if fusion == "concat" else c_in
    conv = Conv1x1Params(conv_init(rng, c_out, width, dtype=dtype), np.zeros(c_out, dtype))
    return HpdParams(conv, BatchNormParams.init(c_out, dtype), fusion)


def minmax_fuse(x: np.ndarray, k: int = 2, pad: bool = False):
    """Return ``(min_pool + max_pool, idx_min, idx_max)``."""
    lo, idx_min = ops.min_pool2d(x, k, pad)
    hi, idx_max = ops.max_pool2d(x, k, pad)
    return lo + hi, idx_min, idx_max


def minmax_fuse_backward(grad_fused: np.ndarray, idx_min: PoolIndices, idx_max: PoolIndices) -> np.ndarray:
    # a constant window selects the same element twice and receives 2x the gradient
    grad_x = ops.pool_backward(grad_fused, idx_min)
    return ops.pool_backward(grad_fused, idx_max, out=grad_x)


def hpd_forward(x: np.ndarray, p: HpdParams, k: int = 2, training: bool = True, pad: bool = False):
    as_tensor4(x)
    if x.shape[1] != p.c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, HPD stage expects {p.c_in}")
    if p.fusion == "sum":
        fused, idx_min, idx_max = minmax_fuse(x, k, pad)
    else:
        lo, idx_min = ops.min_pool2d(x, k, pad)
        hi, idx_max = ops.max_pool2d(x, k, pad)
        fused = np.concatenate([lo, hi], axis=1)
    z = ops.conv1x1_forward(fused, p.conv)
    b, bn_cache = ops.batchnorm_forward(z, p.bn, training)
    y = ops.relu(b)
    cache = HpdCache(idx_min, idx_max, fused, bn_cache, b, p.fusion, training, p.conv.weight.shape)
    return y, cache


def hpd_backward(grad_out: np.ndarray, p: HpdParams, cache: HpdCache):
    """Return ``(grad_x, grads)`` with grads keyed like the parameters."""
    if not cache.training:
        raise UsageError("HPD backward needs a cache from a training-mode forward")
    if grad_out.shape != cache.pre_relu.shape:
        raise UsageError(f"grad {grad_out.shape} does not match cached output {cache.pre_relu.shape}")
    if cache.fusion != p.fusion or cache.weight_shape != p.conv.weight.shape:
        raise UsageError("cache was produced by a different HPD configuration")
    g = ops.relu_backward(grad_out, cache.pre_relu)
    g, grad_gamma, grad_beta = ops.batchnorm_backward(g, cache.bn_cache)
    g, grad_w, grad_b = ops.conv1x1_backward(g, cache.fused, p.conv)
    if p.fusion == "sum":
        grad_x = minmax_fuse_backward(g, cache.idx_min, cache.idx_max)
    else:
        c = g.shape[1] // 2
        grad_x = ops.pool_backward(np.ascontiguousarray(g[:, :c]), cache.idx_min)
        ops.pool_backward(np.ascontiguousarray(g[:, c:]), cache.idx_max, out=grad_x)
    grads = {"conv.weight": grad_w, "conv.bias": grad_b, "bn.gamma": grad_gamma, "bn.beta": grad_beta}
    return grad_x, grads
