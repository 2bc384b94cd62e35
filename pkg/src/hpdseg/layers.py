"""Layers used only by the segmentation network: 3x3 same-padding conv and 2x nearest upsampling."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def conv3x3_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Zero-padded 3x3 cross-correlation, stride 1.  Returns (y, cols) where cols feeds the backward."""
    n, c, h, w = x.shape
    c_out = weight.shape[0]
    if weight.shape != (c_out, c, 3, 3):
        raise ShapeError(f"weight {weight.shape} incompatible with {c} input channels")
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, 9, n, h, w), dtype=x.dtype)
    for t in range(9):
        dy, dx = divmod(t, 3)
        cols[:, t] = xt[:, :, dy : dy + h, dx : dx + w]
    cols = cols.reshape(c * 9, n * h * w)
    y = weight.reshape(c_out, c * 9) @ cols + bias[:, None]
    return np.ascontiguousarray(y.reshape(c_out, n, h, w).transpose(1, 0, 2, 3)), cols


def conv3x3_backward(grad_out: np.ndarray, cols: np.ndarray, weight: np.ndarray, input_shape):
    n, c, h, w = input_shape
    c_out = weight.shape[0]
    g = grad_out.transpose(1, 0, 2, 3).reshape(c_out, n * h * w)
    grad_w = (g @ cols.T).reshape(weight.shape)
    grad_b = g.sum(axis=1)
    dcols = (weight.reshape(c_out, c * 9).T @ g).reshape(c, 9, n, h, w)
    gp = np.zeros((c, n, h + 2, w + 2), dtype=grad_out.dtype)
    for t in range(9):
        dy, dx = divmod(t, 3)
        gp[:, :, dy : dy + h, dx : dx + w] += dcols[:, t]
    grad_x = np.ascontiguousarray(gp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))
    return grad_x, grad_w, grad_b


def upsample2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
