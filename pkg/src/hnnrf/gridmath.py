"""
Differentiable 2D grid operations with hand-written backward passes.

Grids are float64 numpy arrays shaped ``(channels, height, width)``.
Convolutions use zero "same" padding, so the output of a stride-``s``
convolution is ``ceil(H / s) x ceil(W / s)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when grid or kernel shapes are inconsistent."""


def as_grid(values) -> np.ndarray:
    """Coerce ``values`` into a (C, H, W) float64 grid; 2D input gains a channel axis."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid contains non-finite values")
    return arr


@dataclass(frozen=True)
class ConvLayer:
    weight: np.ndarray  # (out, in, kH, kW)
    bias: np.ndarray  # (out,)
    stride: int = 1

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 4:
            raise ShapeError(f"kernel must be (out, in, kH, kW), got {w.shape}")
        if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
            raise ShapeError(f"kernel spatial dims must be odd, got {w.shape[2:]}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer weights must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _im2col(x: np.ndarray, layer: ConvLayer):
    c, h, w = x.shape
    kh, kw = layer.kernel_size
    s = layer.stride
    ho, pt, pb = _same_padding(h, kh, s)
    wo, pl, pr = _same_padding(w, kw, s)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw)
    return cols, (ho, wo, pt, pl, xp.shape)


def _check_conv_input(x: np.ndarray, layer: ConvLayer) -> None:
    if x.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) grid, got shape {x.shape}")
    if x.shape[0] != layer.in_channels:
        raise ShapeError(
            f"input has {x.shape[0]} channels but layer expects {layer.in_channels}"
        )
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"empty input grid {x.shape}")


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Direct-summation convolution (cross-correlation) with zero same-padding."""
    _check_conv_input(x, layer)
    cols, (ho, wo, _, _, _) = _im2col(x, layer)
    out = layer.weight.reshape(layer.out_channels, -1) @ cols.T
    out += layer.bias[:, None]
    return out.reshape(layer.out_channels, ho, wo)


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv2d_forward`."""
    _check_conv_input(x, layer)
    cols, (ho, wo, pt, pl, padded_shape) = _im2col(x, layer)
    if grad_out.shape != (layer.out_channels, ho, wo):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != forward output {(layer.out_channels, ho, wo)}"
        )
    g = grad_out.reshape(layer.out_channels, -1)
    grad_w = (g @ cols).reshape(layer.weight.shape)
    grad_b = g.sum(axis=1)

    c, h, w = x.shape
    kh, kw = layer.kernel_size
    s = layer.stride
    dcols = (g.T @ layer.weight.reshape(layer.out_channels, -1)).reshape(ho, wo, c, kh, kw)
    dxp = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, i, j].transpose(2, 0, 1)
    grad_x = dxp[:, pt : pt + h, pl : pl + w]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow or log(0)."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation matrix of shape (n_out, n_in)."""
    if n_in < 1 or n_out < 1:
        raise ValueError("interpolation sizes must be >= 1")
    if n_in == n_out:
        return np.eye(n_in)
    m = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(x: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Align-corners bilinear resize of every channel to ``target_h x target_w``."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {(target_h, target_w)}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) grid, got shape {x.shape}")
    _, h, w = x.shape
    if (h, w) == (target_h, target_w):
        return x.copy()
    ry = interp_matrix(h, target_h)
    rx = interp_matrix(w, target_w)
    return ry @ x @ rx.T


def bilinear_resize_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    _, th, tw = grad_out.shape
    if (th, tw) == (in_h, in_w):
        return grad_out.copy()
    ry = interp_matrix(in_h, th)
    rx = interp_matrix(in_w, tw)
    return ry.T @ grad_out @ rx


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    analytic_grad: np.ndarray,
    params: np.ndarray,
    eps: float = 1e-4,
    n_probes: int = 100,
    seed: int = 0,
) -> float:
    """
    Compare an analytic gradient against central differences.

    ``f`` maps a parameter array (same shape as ``params``) to a scalar.
    Up to ``n_probes`` coordinates are sampled without replacement (all of
    them if there are fewer). Returns the maximum of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = np.asarray(params, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != params.shape:
        raise ShapeError(f"gradient shape {analytic_grad.shape} != params shape {params.shape}")
    flat = params.ravel()
    n = flat.size
    rng = np.random.default_rng(seed)
    idx = np.arange(n) if n <= n_probes else rng.choice(n, size=n_probes, replace=False)

    worst = 0.0
    for i in idx:
        p = flat.copy()
        p[i] = flat[i] + eps
        fp = f(p.reshape(params.shape))
        p[i] = flat[i] - eps
        fm = f(p.reshape(params.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"objective is not finite at coordinate {i}")
        numeric = (fp - fm) / (2 * eps)
        a = analytic_grad.ravel()[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return float(worst)
