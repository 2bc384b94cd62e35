"""Mini UNet with a pluggable downsampler per encoder stage.

Topology for ``depth`` stages and widths ``C_s = base * 2**s``::

    enc0: double conv  in -> C0
    for s in 0..depth-1:
        down{s}: maxpool | avgpool | stridedconv  (C_s -> C_s)
                 hpd                              (C_s -> C_{s+1}, the 1x1 conv doubles)
        enc{s+1}: double conv  -> C_{s+1}
    for s in depth-1..0:
        up{s}:  nearest 2x upsample, 3x3 conv + BN + ReLU  C_{s+1} -> C_s
        dec{s}: concat [skip_s, up] then double conv  2*C_s -> C_s
    head: 1x1 conv  C0 -> classes

A "double conv" is (3x3 conv, BN, ReLU) twice.  Parameters live in one flat
dict keyed by layer name; batch-norm running statistics live in ``buffers``.
Each tensor is initialised from its own child generator keyed by name, so
changing one stage leaves every other same-shaped tensor bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hpd as hpd_mod
from . import layers, ops
from .config import format_kv, read_kv
from .errors import ConfigError, ShapeError
from .ops import BatchNormParams, Conv1x1Params
from .tensor import Rng, as_tensor4

DOWNSAMPLERS = ("maxpool", "hpd", "avgpool", "stridedconv")


@dataclass
class NetConfig:
    depth: int = 3
    base_channels: int = 16
    classes: int = 4
    in_channels: int = 1
    downsamplers: list[str] | None = None
    fusion: str = "sum"
    num_hpd: int | None = None

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.fusion not in hpd_mod.FUSIONS:
            raise ConfigError(f"fusion must be one of {hpd_mod.FUSIONS}, got {self.fusion!r}")
        if self.num_hpd is not None and not 0 <= self.num_hpd <= self.depth:
            raise ConfigError(f"num_hpd must be in [0, {self.depth}], got {self.num_hpd}")
        if self.downsamplers is None:
            k = self.num_hpd or 0
            self.downsamplers = ["hpd"] * k + ["maxpool"] * (self.depth - k)
        else:
            self.downsamplers = list(self.downsamplers)
            if len(self.downsamplers) != self.depth:
                raise ConfigError(f"{len(self.downsamplers)} downsamplers for depth {self.depth}")
            bad = [d for d in self.downsamplers if d not in DOWNSAMPLERS]
            if bad:
                raise ConfigError(f"unknown downsampler(s) {bad}; choose from {DOWNSAMPLERS}")
            if self.num_hpd is not None and self.downsamplers != (
                ["hpd"] * self.num_hpd + ["maxpool"] * (self.depth - self.num_hpd)
            ):
                raise ConfigError("num_hpd disagrees with the explicit downsampler list")

    def width(self, s: int) -> int:
        return self.base_channels * 2**s

    def down_out(self, s: int) -> int:
        return self.width(s + 1) if self.downsamplers[s] == "hpd" else self.width(s)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "base_channels": self.base_channels,
            "classes": self.classes,
            "in_channels": self.in_channels,
            "downsamplers": ",".join(self.downsamplers),
            "fusion": self.fusion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        def get_int(key):
            return int(d[key]) if d.get(key) not in (None, "") else None

        kwargs = {k: get_int(k) for k in ("depth", "base_channels", "classes", "in_channels", "num_hpd")}
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        if d.get("downsamplers"):
            ds = d["downsamplers"]
            kwargs["downsamplers"] = ds.split(",") if isinstance(ds, str) else list(ds)
        if d.get("fusion"):
            kwargs["fusion"] = d["fusion"]
        return cls(**kwargs)


def layer_shapes(cfg: NetConfig) -> tuple[dict[str, tuple], dict[str, tuple]]:
    """Parameter and buffer shapes in construction order."""
    params: dict[str, tuple] = {}
    buffers: dict[str, tuple] = {}

    def conv(name, c_out, c_in, k):
        params[f"{name}.weight"] = (c_out, c_in, k, k) if k > 1 else (c_out, c_in)
        params[f"{name}.bias"] = (c_out,)

    def bn(name, c):
        params[f"{name}.gamma"] = (c,)
        params[f"{name}.beta"] = (c,)
        buffers[f"{name}.running_mean"] = (c,)
        buffers[f"{name}.running_var"] = (c,)

    def double(name, c_in, c_out):
        conv(f"{name}.conv1", c_out, c_in, 3)
        bn(f"{name}.bn1", c_out)
        conv(f"{name}.conv2", c_out, c_out, 3)
        bn(f"{name}.bn2", c_out)

    double("enc0", cfg.in_channels, cfg.width(0))
    for s in range(cfg.depth):
        kind = cfg.downsamplers[s]
        if kind == "hpd":
            c_in = cfg.width(s) * (2 if cfg.fusion == "concat" else 1)
            conv(f"down{s}.conv", cfg.width(s + 1), c_in, 1)
            bn(f"down{s}.bn", cfg.width(s + 1))
        elif kind == "stridedconv":
            conv(f"down{s}", cfg.width(s), cfg.width(s), 2)
        double(f"enc{s + 1}", cfg.down_out(s), cfg.width(s + 1))
    for s in reversed(range(cfg.depth)):
        conv(f"up{s}.conv", cfg.width(s), cfg.width(s + 1), 3)
        bn(f"up{s}.bn", cfg.width(s))
        double(f"dec{s}", 2 * cfg.width(s), cfg.width(s))
    conv("head", cfg.classes, cfg.width(0), 1)
    return params, buffers


@dataclass
class NetParams:
    cfg: NetConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def bn(self, name: str) -> BatchNormParams:
        return BatchNormParams(
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
        )

    def hpd(self, s: int) -> hpd_mod.HpdParams:
        conv = Conv1x1Params(self.params[f"down{s}.conv.weight"], self.params[f"down{s}.conv.bias"])
        return hpd_mod.HpdParams(conv, self.bn(f"down{s}.bn"), self.cfg.fusion)

    def copy(self) -> "NetParams":
        return NetParams(
            self.cfg,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


def build_net(cfg: NetConfig, rng: Rng | int, dtype=np.float32) -> NetParams:
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    shapes, buffer_shapes = layer_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".weight"):
            fan_in = math.prod(shape[1:])
            params[name] = hpd_mod.conv_init(rng.child(name), shape[0], fan_in, shape, dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    buffers = {
        name: (np.ones if name.endswith("running_var") else np.zeros)(shape, dtype)
        for name, shape in buffer_shapes.items()
    }
    return NetParams(cfg, params, buffers)


def count_params(net: NetParams) -> int:
    """Learnable scalars only; running statistics are excluded."""
    return sum(int(v.size) for v in net.params.values())


# -- forward / backward ------------------------------------------------------


def _cbr_forward(net, x, conv, bn, training):
    y, cols = layers.conv3x3_forward(x, net.params[f"{conv}.weight"], net.params[f"{conv}.bias"])
    z, bn_cache = ops.batchnorm_forward(y, net.bn(bn), training)
    return ops.relu(z), (conv, bn, x.shape, cols, bn_cache, z)


def _cbr_backward(net, g, cache, grads):
    conv, bn, x_shape, cols, bn_cache, z = cache
    g = ops.relu_backward(g, z)
    g, grads[f"{bn}.gamma"], grads[f"{bn}.beta"] = ops.batchnorm_backward(g, bn_cache)
    g, gw, gb = layers.conv3x3_backward(g, cols, net.params[f"{conv}.weight"], x_shape)
    grads[f"{conv}.weight"] = gw
    grads[f"{conv}.bias"] = gb
    return g


def _double_forward(net, x, name, training):
    h, c1 = _cbr_forward(net, x, f"{name}.conv1", f"{name}.bn1", training)
    h, c2 = _cbr_forward(net, h, f"{name}.conv2", f"{name}.bn2", training)
    return h, (c1, c2)


def _double_backward(net, g, cache, grads):
    g = _cbr_backward(net, g, cache[1], grads)
    return _cbr_backward(net, g, cache[0], grads)


def _down_forward(net, x, s, training):
    kind = net.cfg.downsamplers[s]
    if kind == "maxpool":
        y, idx = ops.max_pool2d(x, 2)
        return y, idx
    if kind == "avgpool":
        return ops.avg_pool2d(x, 2), x.shape
    if kind == "stridedconv":
        y = ops.strided_conv_downsample(x, net.params[f"down{s}.weight"], net.params[f"down{s}.bias"])
        return y, x
    return hpd_mod.hpd_forward(x, net.hpd(s), 2, training)


def _down_backward(net, g, s, cache, grads):
    kind = net.cfg.downsamplers[s]
    if kind == "maxpool":
        return ops.pool_backward(g, cache)
    if kind == "avgpool":
        return ops.avg_pool_backward(g, cache, 2)
    if kind == "stridedconv":
        gx, gw, gb = ops.strided_conv_backward(g, cache, net.params[f"down{s}.weight"])
        grads[f"down{s}.weight"] = gw
        grads[f"down{s}.bias"] = gb
        return gx
    gx, hgrads = hpd_mod.hpd_backward(g, net.hpd(s), cache)
    for key, val in hgrads.items():
        grads[f"down{s}.{key}"] = val
    return gx


def net_forward(x: np.ndarray, net: NetParams, training: bool = True):
    """Return ``(logits, caches)``; logits have the input's spatial size."""
    as_tensor4(x)
    cfg = net.cfg
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ShapeError(f"input has {c} channels, net expects {cfg.in_channels}")
    step = 2**cfg.depth
    if h % step or w % step:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by 2**depth = {step}")
    x = x.astype(net.dtype, copy=False)
    caches: dict = {"enc": [], "down": [], "up": [], "dec": []}
    skips = []
    feat, cache = _double_forward(net, x, "enc0", training)
    caches["enc"].append(cache)
    for s in range(cfg.depth):
        skips.append(feat)
        feat, cache = _down_forward(net, feat, s, training)
        caches["down"].append(cache)
        feat, cache = _double_forward(net, feat, f"enc{s + 1}", training)
        caches["enc"].append(cache)
    for s in reversed(range(cfg.depth)):
        feat, cache = _cbr_forward(net, layers.upsample2x(feat), f"up{s}.conv", f"up{s}.bn", training)
        caches["up"].append(cache)
        feat, cache = _double_forward(net, np.concatenate([skips[s], feat], axis=1), f"dec{s}", training)
        caches["dec"].append(cache)
    head = Conv1x1Params(net.params["head.weight"], net.params["head.bias"])
    caches["head"] = feat
    return ops.conv1x1_forward(feat, head), caches


def net_backward(grad_logits: np.ndarray, net: NetParams, caches):
    """Return ``(grad_x, grads)`` with ``grads`` keyed exactly like ``net.params``."""
    cfg = net.cfg
    grads: dict[str, np.ndarray] = {}
    head = Conv1x1Params(net.params["head.weight"], net.params["head.bias"])
    g, grads["head.weight"], grads["head.bias"] = ops.conv1x1_backward(grad_logits, caches["head"], head)
    skip_grads = [None] * cfg.depth
    for s in range(cfg.depth):
        i = cfg.depth - 1 - s
        g = _double_backward(net, g, caches["dec"][i], grads)
        c = cfg.width(s)
        skip_grads[s] = g[:, :c]
        g = _cbr_backward(net, np.ascontiguousarray(g[:, c:]), caches["up"][i], grads)
        g = layers.upsample2x_backward(g)
    for s in reversed(range(cfg.depth)):
        g = _double_backward(net, g, caches["enc"][s + 1], grads)
        g = _down_backward(net, g, s, caches["down"][s], grads)
        g = g + skip_grads[s]
    g = _double_backward(net, g, caches["enc"][0], grads)
    return g, {k: grads[k] for k in net.params}


def predict(net: NetParams, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Arg-max class map for each image, inference mode."""
    out = []
    for start in range(0, images.shape[0], batch_size):
        logits, _ = net_forward(images[start : start + batch_size], net, training=False)
        out.append(logits.argmax(axis=1))
    return np.concatenate(out)


# -- cost accounting ---------------------------------------------------------
# FLOP convention: multiply-accumulate = 2, bias add = 1 per output element,
# pooling comparison = 1, BN = 2 and ReLU = 1 per element, fusion add = 1.


def conv_flops(n: int, c_in: int, c_out: int, h_out: int, w_out: int, k: int = 1) -> int:
    return (2 * k * k * c_in * c_out + c_out) * h_out * w_out * n


def pool_flops(n: int, c: int, h_out: int, w_out: int, k: int = 2) -> int:
    return (k * k - 1) * c * h_out * w_out * n


def avgpool_flops(n: int, c: int, h_out: int, w_out: int, k: int = 2) -> int:
    return k * k * c * h_out * w_out * n


def bn_relu_flops(n: int, c: int, h: int, w: int) -> int:
    return 3 * c * h * w * n


def count_flops(cfg: NetConfig, input_shape) -> int:
    n, _, h, w = input_shape
    total = 0

    def cbr(c_in, c_out, hh, ww):
        return conv_flops(n, c_in, c_out, hh, ww, 3) + bn_relu_flops(n, c_out, hh, ww)

    def double(c_in, c_out, hh, ww):
        return cbr(c_in, c_out, hh, ww) + cbr(c_out, c_out, hh, ww)

    total += double(cfg.in_channels, cfg.width(0), h, w)
    for s in range(cfg.depth):
        hh, ww = h >> (s + 1), w >> (s + 1)
        c = cfg.width(s)
        kind = cfg.downsamplers[s]
        if kind == "maxpool":
            total += pool_flops(n, c, hh, ww)
        elif kind == "avgpool":
            total += avgpool_flops(n, c, hh, ww)
        elif kind == "stridedconv":
            total += conv_flops(n, c, c, hh, ww, 2)
        else:
            c_next = cfg.width(s + 1)
            total += 2 * pool_flops(n, c, hh, ww)
            if cfg.fusion == "sum":
                total += c * hh * ww * n
                total += conv_flops(n, c, c_next, hh, ww, 1)
            else:
                total += conv_flops(n, 2 * c, c_next, hh, ww, 1)
            total += bn_relu_flops(n, c_next, hh, ww)
        total += double(cfg.down_out(s), cfg.width(s + 1), hh, ww)
    for s in reversed(range(cfg.depth)):
        hh, ww = h >> s, w >> s
        total += cbr(cfg.width(s + 1), cfg.width(s), hh, ww)
        total += double(2 * cfg.width(s), cfg.width(s), hh, ww)
    total += conv_flops(n, cfg.width(0), cfg.classes, h, w, 1)
    return total


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(net: NetParams, root) -> Path:
    """Write one container per tensor plus ``net.txt`` (config) and ``index.txt`` (names)."""
    from .data import save_tensor

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for name, arr in list(net.params.items()) + list(net.buffers.items()):
        save_tensor(root / f"{name}.hpdt", arr.reshape((1,) * (4 - arr.ndim) + arr.shape))
        names.append(name)
    (root / "net.txt").write_text(format_kv(net.cfg.to_dict()), encoding="utf-8")
    (root / "index.txt").write_text("\n".join(names) + "\n", encoding="utf-8")
    return root


def load_checkpoint(root) -> NetParams:
    from .data import load_tensor

    root = Path(root)
    cfg = NetConfig.from_dict(read_kv(root / "net.txt"))
    shapes, buffer_shapes = layer_shapes(cfg)
    tensors = {}
    for name, shape in {**shapes, **buffer_shapes}.items():
        arr = load_tensor(root / f"{name}.hpdt")
        if arr.size != math.prod(shape):
            raise ShapeError(f"{name}: stored {arr.shape} does not fit {shape}")
        tensors[name] = arr.reshape(shape)
    return NetParams(cfg, {k: tensors[k] for k in shapes}, {k: tensors[k] for k in buffer_shapes})
