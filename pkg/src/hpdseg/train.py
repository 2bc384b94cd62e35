"""Loss, SGD with poly decay, the training loop, evaluation and the HPD-count sweep."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import metrics
from .data import SegSample, stack
from .errors import ArgumentError, ConfigError, DataError, ShapeError
from .net import NetConfig, NetParams, build_net, net_backward, net_forward, predict
from .tensor import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    power: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_iters: int = 200
    seed: int = 0
    loss_mix: float = 0.5
    eval_every: int = 50
    dice_smooth: float = 1.0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not self.power > 0:
            raise ConfigError(f"power must be > 0, got {self.power}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.loss_mix <= 1:
            raise ConfigError(f"loss_mix must be in [0, 1], got {self.loss_mix}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch statistics")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")


# -- schedule and optimizer --------------------------------------------------


def poly_lr(it: int, max_iters: int, base_lr: float = 0.01, power: float = 0.9) -> float:
    """``base_lr * (1 - it / max_iters) ** power``."""
    if max_iters <= 0 or not 0 <= it <= max_iters:
        raise ArgumentError(f"iteration {it} outside [0, {max_iters}]")
    return base_lr * (1.0 - it / max_iters) ** power


def decays(name: str) -> bool:
    """Weight decay applies to convolution weights only."""
    return name.endswith(".weight")


def sgd_step(params: dict, grads: dict, lr: float, weight_decay: float = 0.0) -> dict:
    """In-place ``p -= lr * (g + wd * p)``; wd is zero for biases and BN affine terms."""
    if params.keys() != grads.keys():
        raise ShapeError(f"gradient keys differ from parameter keys: {set(params) ^ set(grads)}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        dt = p.dtype.type
        if weight_decay and decays(name):
            p -= dt(lr) * (g + dt(weight_decay) * p)
        else:
            p -= dt(lr) * g
    return params


# -- loss --------------------------------------------------------------------


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c})")
    return labels


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    return e / s, z - np.log(s)


def _one_hot(labels, c, dtype):
    return (labels[:, None] == np.arange(c)[None, :, None, None]).astype(dtype)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    labels = _check_labels(logits, labels)
    n, c, h, w = logits.shape
    p, logp = _softmax(logits)
    onehot = _one_hot(labels, c, logits.dtype)
    m = n * h * w
    return float(-(onehot * logp).sum() / m), (p - onehot) / logits.dtype.type(m)


def soft_dice_loss(logits: np.ndarray, labels: np.ndarray, smooth: float = 1.0):
    """``1 - mean_c (2 I_c + s) / (P_c + G_c + s)`` over all classes, batch-pooled."""
    labels = _check_labels(logits, labels)
    c = logits.shape[1]
    p, _ = _softmax(logits)
    onehot = _one_hot(labels, c, logits.dtype)
    axes = (0, 2, 3)
    inter = (p * onehot).sum(axis=axes)
    denom = p.sum(axis=axes) + onehot.sum(axis=axes) + smooth
    dice = (2 * inter + smooth) / denom
    d_dp = -(2 * onehot * denom[:, None, None] - (2 * inter + smooth)[:, None, None]) / (denom**2)[:, None, None] / c
    grad = p * (d_dp - (p * d_dp).sum(axis=1, keepdims=True))
    return float(1.0 - dice.mean()), grad.astype(logits.dtype, copy=False)


def loss_ce_dice(logits: np.ndarray, labels: np.ndarray, mix: float = 0.5, smooth: float = 1.0):
    """``mix * CE + (1 - mix) * soft-Dice`` and its gradient with respect to the logits."""
    ce, g_ce = cross_entropy(logits, labels)
    dl, g_dl = soft_dice_loss(logits, labels, smooth)
    dt = logits.dtype.type
    return mix * ce + (1 - mix) * dl, dt(mix) * g_ce + dt(1 - mix) * g_dl


# -- training ----------------------------------------------------------------


def evaluate(net: NetParams, samples: list[SegSample], batch_size: int = 16) -> tuple[float, np.ndarray]:
    images, labels = stack(samples)
    preds = predict(net, images, batch_size)
    return metrics.dataset_mdsc(preds, labels, net.cfg.classes)


def format_record(rec: dict) -> str:
    parts = [f"iter={rec['iter']}", f"lr={rec['lr']:.8g}", f"loss={rec['loss']:.8g}"]
    if "mdsc" in rec:
        parts.append(f"mdsc={rec['mdsc']:.8g}")
    return " ".join(parts)


def _batches(n: int, batch_size: int, rng: Rng):
    epoch = 0
    while True:
        order = rng.child(f"epoch/{epoch}").permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start : start + batch_size]
        epoch += 1


def train(net_cfg: NetConfig, train_cfg: TrainConfig, train_set: list[SegSample],
          val_set: list[SegSample] | None = None, on_record=None, dtype=np.float32):
    """Run ``max_iters`` SGD steps; returns ``(net, history)``.

    Each history record holds ``iter`` (steps completed), ``lr`` (the rate used
    for that step), ``loss`` (on that batch, before the update) and, every
    ``eval_every`` steps and at the end, ``mdsc`` on ``val_set``.
    """
    if not train_set:
        raise DataError("training set is empty")
    images, labels = stack(train_set)
    if images.shape[1] != net_cfg.in_channels:
        raise DataError(f"images have {images.shape[1]} channels, net expects {net_cfg.in_channels}")
    step = 2**net_cfg.depth
    if images.shape[2] % step or images.shape[3] % step:
        raise DataError(f"image size {images.shape[2:]} not divisible by {step}")
    if labels.max() >= net_cfg.classes:
        raise DataError(f"labels reach {labels.max()} but the net has {net_cfg.classes} classes")
    if len(train_set) < train_cfg.batch_size:
        raise DataError(f"{len(train_set)} training samples cannot fill a batch of {train_cfg.batch_size}")

    root = Rng(train_cfg.seed)
    net = build_net(net_cfg, root.child("init"), dtype)
    history: list[dict] = []
    batches = _batches(len(train_set), train_cfg.batch_size, root.child("shuffle"))
    for it in range(train_cfg.max_iters):
        idx = next(batches)
        lr = poly_lr(it, train_cfg.max_iters, train_cfg.base_lr, train_cfg.power)
        logits, caches = net_forward(images[idx], net, training=True)
        loss, grad = loss_ce_dice(logits, labels[idx], train_cfg.loss_mix, train_cfg.dice_smooth)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        _, grads = net_backward(grad, net, caches)
        sgd_step(net.params, grads, lr, train_cfg.weight_decay)
        rec = {"iter": it + 1, "lr": lr, "loss": loss}
        done = it + 1 == train_cfg.max_iters
        if val_set and ((it + 1) % train_cfg.eval_every == 0 or done):
            rec["mdsc"] = evaluate(net, val_set)[0]
        history.append(rec)
        if on_record is not None:
            on_record(rec)
        log.debug(format_record(rec))
    return net, history


# -- ablation over the number of HPD stages ----------------------------------


@dataclass
class AblationRow:
    num_hpd: int
    mdsc: float
    per_class: np.ndarray
    iters: int
    final_loss: float
    history: list


def ablate(sweep, net_cfg: NetConfig, train_cfg: TrainConfig, train_set, val_set, on_row=None) -> list[AblationRow]:
    """Train one net per HPD count with identical seeds and data; score each on ``val_set``."""
    sweep = [int(k) for k in sweep]
    for k in sweep:
        if not 0 <= k <= net_cfg.depth:
            raise ConfigError(f"num_hpd {k} outside [0, {net_cfg.depth}]")
    rows = []
    for k in sweep:
        cfg = replace(net_cfg, downsamplers=None, num_hpd=k)
        net, history = train(cfg, train_cfg, train_set, None)
        score, per_class = evaluate(net, val_set)
        row = AblationRow(k, score, per_class, len(history), history[-1]["loss"] if history else float("nan"), history)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def ablation_tsv(rows: list[AblationRow]) -> str:
    n_fg = len(rows[0].per_class) if rows else 0
    header = ["num_hpd", "mdsc"] + [f"dsc_{c}" for c in range(1, n_fg + 1)] + ["iters", "final_loss"]
    lines = ["\t".join(header)]
    for r in rows:
        vals = [str(r.num_hpd), f"{r.mdsc:.6f}"] + [f"{v:.6f}" for v in r.per_class]
        lines.append("\t".join(vals + [str(r.iters), f"{r.final_loss:.6f}"]))
    return "\n".join(lines) + "\n"


def ablation_text(rows: list[AblationRow]) -> str:
    cells = [line.split("\t") for line in ablation_tsv(rows).splitlines()]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cells[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells) + "\n"
