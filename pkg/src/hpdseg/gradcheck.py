"""Central finite-difference checks for every backward pass.

All checks run in float64 with step ``h = 1e-5``.  A scalar loss is formed as
``sum(R * f(x))`` with a fixed random ``R`` so that no gradient vanishes by
symmetry (e.g. batch norm under a plain sum).  The reported error is

    max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-6)

where the floor keeps exact zeros from turning round-off into huge ratios.
Pooling inputs are resampled until no window holds two values closer than
1e-4, so the selected element cannot change under the perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import hpd, ops
from .net import NetConfig, build_net, net_backward, net_forward
from .tensor import Rng
from .train import loss_ce_dice

STEP = 1e-5
REL_FLOOR = 1e-6
TOL_LINEAR = 1e-4
TOL_COMPOSITE = 1e-3


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP, indices=None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``x``, perturbing ``x`` in place.

    With ``indices`` (flat positions) only those entries are filled; the rest
    stay NaN.
    """
    grad = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mask = ~np.isnan(n)
    a, n = a[mask], n[mask]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)))


def min_window_gap(x: np.ndarray, k: int) -> float:
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    if k == 1:
        return np.inf
    diffs = np.abs(win[..., :, None] - win[..., None, :])
    iu = np.triu_indices(k * k, 1)
    return float(diffs[..., iu[0], iu[1]].min())


def tie_free_uniform(rng: Rng, shape, k: int = 2, lo: float = -1.0, hi: float = 1.0, gap: float = 1e-4) -> np.ndarray:
    while True:
        x = rng.uniform(shape, lo, hi)
        if min_window_gap(x, k) > gap:
            return x


def _projected(fn, r):
    return lambda: float((fn() * r).sum())


# -- individual checks; each returns the max relative error -----------------


def check_pool(kind: str, seed: int = 7) -> float:
    rng = Rng(seed)
    x = tie_free_uniform(rng, (1, 2, 4, 4))
    pool = ops.min_pool2d if kind == "min" else ops.max_pool2d
    y, idx = pool(x, 2)
    r = rng.uniform(y.shape, -1, 1)
    analytic = ops.pool_backward(r, idx)
    numeric = numerical_grad(_projected(lambda: pool(x, 2)[0], r), x)
    return rel_error(analytic, numeric)


def check_avg_pool(seed: int = 7) -> float:
    rng = Rng(seed)
    x = rng.uniform((2, 2, 4, 4), -1, 1)
    r = rng.uniform((2, 2, 2, 2), -1, 1)
    analytic = ops.avg_pool_backward(r, x.shape, 2)
    return rel_error(analytic, numerical_grad(_projected(lambda: ops.avg_pool2d(x, 2), r), x))


def check_conv1x1(seed: int = 3) -> float:
    rng = Rng(seed)
    x = rng.uniform((2, 3, 3, 3), -1, 1)
    p = ops.Conv1x1Params(rng.uniform((4, 3), -1, 1), rng.uniform((4,), -1, 1))
    r = rng.uniform((2, 4, 3, 3), -1, 1)
    gx, gw, gb = ops.conv1x1_backward(r, x, p)
    f = _projected(lambda: ops.conv1x1_forward(x, p), r)
    return max(
        rel_error(gx, numerical_grad(f, x)),
        rel_error(gw, numerical_grad(f, p.weight)),
        rel_error(gb, numerical_grad(f, p.bias)),
    )


def check_batchnorm(seed: int = 5) -> float:
    rng = Rng(seed)
    x = rng.uniform((2, 3, 3, 3), -2, 2)
    p = ops.BatchNormParams.init(3)
    p.gamma[:] = rng.uniform((3,), 0.5, 1.5)
    p.beta[:] = rng.uniform((3,), -0.5, 0.5)
    r = rng.uniform(x.shape, -1, 1)
    _, cache = ops.batchnorm_forward(x, p, training=True)
    gx, gg, gb = ops.batchnorm_backward(r, cache)
    f = _projected(lambda: ops.batchnorm_forward(x, p, training=True)[0], r)
    return max(
        rel_error(gx, numerical_grad(f, x)),
        rel_error(gg, numerical_grad(f, p.gamma)),
        rel_error(gb, numerical_grad(f, p.beta)),
    )


def check_relu(seed: int = 9) -> float:
    rng = Rng(seed)
    x = rng.uniform((2, 2, 3, 3), -1, 1)
    x[np.abs(x) < 1e-3] = 0.5
    r = rng.uniform(x.shape, -1, 1)
    analytic = ops.relu_backward(r, x)
    return rel_error(analytic, numerical_grad(_projected(lambda: ops.relu(x), r), x))


def check_strided_conv(seed: int = 13) -> float:
    rng = Rng(seed)
    x = rng.uniform((2, 3, 4, 4), -1, 1)
    w = rng.uniform((2, 3, 2, 2), -1, 1)
    b = rng.uniform((2,), -1, 1)
    r = rng.uniform((2, 2, 2, 2), -1, 1)
    gx, gw, gb = ops.strided_conv_backward(r, x, w)
    f = _projected(lambda: ops.strided_conv_downsample(x, w, b), r)
    return max(
        rel_error(gx, numerical_grad(f, x)),
        rel_error(gw, numerical_grad(f, w)),
        rel_error(gb, numerical_grad(f, b)),
    )


def check_loss(seed: int = 17) -> float:
    rng = Rng(seed)
    logits = rng.uniform((2, 3, 4, 4), -2, 2)
    labels = rng.integers(0, 3, 32).reshape(2, 4, 4)
    _, grad = loss_ce_dice(logits, labels, 0.5)
    return rel_error(grad, numerical_grad(lambda: loss_ce_dice(logits, labels, 0.5)[0], logits))


def check_hpd(fusion: str = "sum", seed: int = 19) -> float:
    rng = Rng(seed)
    x = tie_free_uniform(rng, (2, 2, 4, 4))
    p = hpd.init_hpd(2, 4, rng.child("init"), fusion)
    p.bn.gamma[:] = rng.uniform((4,), 0.5, 1.5)
    p.bn.beta[:] = rng.uniform((4,), 0.2, 0.8)
    y, cache = hpd.hpd_forward(x, p, 2, training=True)
    r = rng.uniform(y.shape, -1, 1)
    gx, grads = hpd.hpd_backward(r, p, cache)
    f = _projected(lambda: hpd.hpd_forward(x, p, 2, training=True)[0], r)
    errs = [rel_error(gx, numerical_grad(f, x))]
    for key, arr in (("conv.weight", p.conv.weight), ("conv.bias", p.conv.bias),
                     ("bn.gamma", p.bn.gamma), ("bn.beta", p.bn.beta)):
        errs.append(rel_error(grads[key], numerical_grad(f, arr)))
    return max(errs)


def check_net(downsampler: str = "hpd", fusion: str = "sum", seed: int = 23, per_tensor: int = 4) -> float:
    """Depth-1 net on a 1x1x8x8 input, scalar CE+Dice loss.

    Every input pixel is checked, plus ``per_tensor`` random entries of each
    parameter tensor.
    """
    rng = Rng(seed)
    cfg = NetConfig(depth=1, base_channels=4, classes=3, downsamplers=[downsampler], fusion=fusion)
    net = build_net(cfg, rng.child("init"), dtype=np.float64)
    x = tie_free_uniform(rng, (1, 1, 8, 8), lo=0.0, hi=1.0)
    labels = rng.integers(0, 3, 64).reshape(1, 8, 8)

    def loss():
        logits, _ = net_forward(x, net, training=True)
        return loss_ce_dice(logits, labels)[0]

    logits, caches = net_forward(x, net, training=True)
    _, g = loss_ce_dice(logits, labels)
    gx, grads = net_backward(g, net, caches)
    errs = [rel_error(gx, numerical_grad(loss, x))]
    pick = rng.child("pick")
    for name, arr in net.params.items():
        idx = np.unique(pick.integers(0, arr.size, per_tensor))
        errs.append(rel_error(grads[name], numerical_grad(loss, arr, indices=idx)))
    return max(errs)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error < self.tolerance


SUITE: list[tuple[str, Callable[[], float], float]] = [
    ("min_pool2d", lambda: check_pool("min"), TOL_LINEAR),
    ("max_pool2d", lambda: check_pool("max"), TOL_LINEAR),
    ("avg_pool2d", check_avg_pool, TOL_LINEAR),
    ("conv1x1", check_conv1x1, TOL_LINEAR),
    ("strided_conv", check_strided_conv, TOL_LINEAR),
    ("relu", check_relu, TOL_LINEAR),
    ("batchnorm", check_batchnorm, TOL_COMPOSITE),
    ("loss_ce_dice", check_loss, TOL_COMPOSITE),
    ("hpd_sum", lambda: check_hpd("sum"), TOL_COMPOSITE),
    ("hpd_concat", lambda: check_hpd("concat"), TOL_COMPOSITE),
    ("net_depth1_maxpool", lambda: check_net("maxpool"), TOL_COMPOSITE),
    ("net_depth1_hpd", lambda: check_net("hpd"), TOL_COMPOSITE),
    ("net_depth1_avgpool", lambda: check_net("avgpool"), TOL_COMPOSITE),
    ("net_depth1_stridedconv", lambda: check_net("stridedconv"), TOL_COMPOSITE),
]


def run_suite(names=None) -> list[CheckResult]:
    return [CheckResult(name, fn(), tol) for name, fn, tol in SUITE if names is None or name in names]
