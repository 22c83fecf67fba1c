"""Differentiable kernels used by the appearance network.

All image kernels take channel-last inputs ``[..., H, W, C]``; any leading
dimensions are treated as a batch (frames of a video, videos of a batch).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, matmul

LRN_DEFAULTS = dict(n=5, k=2.0, alpha=1e-4, beta=0.75)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 3) + [(padding, padding), (padding, padding), (0, 0)]
    return np.pad(x, pad)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[..., H, W, Cin]`` with ``kernels[K, K, Cin, Cout]``."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim < 3:
        raise ShapeError(f"conv2d input must be [..., H, W, C], got {x.shape}")
    K, K2, cin, cout = kernels.shape
    if K != K2:
        raise ShapeError(f"only square kernels are supported, got {kernels.shape}")
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels but kernels expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    H, W = x.shape[-3], x.shape[-2]
    if K > H + 2 * padding or K > W + 2 * padding:
        raise ShapeError(f"kernel {K} larger than padded input {H}x{W} (padding {padding})")
    Ho, Wo = conv_output_size(H, K, stride, padding), conv_output_size(W, K, stride, padding)

    xp = _pad_hw(x.data, padding)
    # [..., Ho, Wo, Cin, K, K]
    cols = sliding_window_view(xp, (K, K), axis=(-3, -2))[..., ::stride, ::stride, :, :, :]
    cols = cols[..., :Ho, :Wo, :, :, :]
    w = kernels.data.transpose(2, 0, 1, 3)  # [Cin, K, K, Cout]
    out = np.tensordot(cols, w, axes=([-3, -2, -1], [0, 1, 2])) + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gb = g.sum(axis=lead)
        gw = np.tensordot(cols, g, axes=(lead, lead))  # [Cin, K, K, Cout]
        gw = gw.transpose(1, 2, 0, 3)
        gxp = np.zeros(xp.shape)
        kd = kernels.data
        for ki in range(K):
            for kj in range(K):
                gxp[..., ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride, :] += g @ kd[ki, kj].T
        if padding:
            gxp = gxp[..., padding:-padding, padding:-padding, :]
        return gxp, gw, gb

    return Tensor._make(out, (x, kernels, bias), backward, "conv2d")


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max over ``window x window`` patches; ties route gradient to the first scanned cell."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    H, W, C = x.shape[-3:]
    if window > H or window > W:
        raise ShapeError(f"pool window {window} exceeds input {H}x{W}")
    Ho, Wo = conv_output_size(H, window, stride, 0), conv_output_size(W, window, stride, 0)
    win = sliding_window_view(x.data, (window, window), axis=(-3, -2))[..., ::stride, ::stride, :, :, :]
    win = win[..., :Ho, :Wo, :, :, :]
    flat = win.reshape(win.shape[:-2] + (window * window,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        B = int(np.prod(x.shape[:-3], dtype=int))
        a = arg.reshape(B, Ho, Wo, C)
        rows = (np.arange(Ho) * stride)[None, :, None, None] + a // window
        cols = (np.arange(Wo) * stride)[None, None, :, None] + a % window
        gx = np.zeros((B, H, W, C))
        np.add.at(gx, (np.arange(B)[:, None, None, None], rows, cols, np.arange(C)), g.reshape(B, Ho, Wo, C))
        return (gx.reshape(x.shape),)

    return Tensor._make(out, (x,), backward, "maxpool2d")


def _channel_window_sum(v: np.ndarray, n: int) -> np.ndarray:
    """Sum over channels c' in [c - n//2, c + n//2] clipped to valid channels."""
    C = v.shape[-1]
    half = n // 2
    csum = np.concatenate([np.zeros(v.shape[:-1] + (1,)), np.cumsum(v, axis=-1)], axis=-1)
    lo = np.clip(np.arange(C) - half, 0, C)
    hi = np.clip(np.arange(C) + half + 1, 0, C)
    return csum[..., hi] - csum[..., lo]


def local_response_norm(
    x: Tensor,
    n: int = LRN_DEFAULTS["n"],
    k: float = LRN_DEFAULTS["k"],
    alpha: float = LRN_DEFAULTS["alpha"],
    beta: float = LRN_DEFAULTS["beta"],
) -> Tensor:
    """Cross-channel normalization ``x / (k + alpha * sum_window x^2) ** beta``."""
    x = as_tensor(x)
    if n < 1:
        raise ValueError("n must be >= 1")
    if k <= 0 or beta <= 0 or alpha < 0:
        raise ValueError("k and beta must be positive, alpha non-negative")
    xd = x.data
    denom = k + alpha * _channel_window_sum(xd * xd, n)
    scale = denom ** (-beta)
    out = xd * scale

    def backward(g):
        inner = _channel_window_sum(g * xd * scale / denom, n)
        return (g * scale - 2.0 * alpha * beta * xd * inner,)

    return Tensor._make(out, (x,), backward, "lrn")


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def sigmoid(x: Tensor) -> Tensor:
    return as_tensor(x).sigmoid()


def tanh(x: Tensor) -> Tensor:
    return as_tensor(x).tanh()


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``weight @ x + bias`` with ``weight[dout, din]``; ``x`` may carry leading batch dims."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, weight.transpose())
    return out if bias is None else out + bias


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | int | None = None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(rng)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask


def mae_loss(predictions, targets) -> Tensor:
    predictions = as_tensor(predictions)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ShapeError(f"predictions {predictions.shape} and targets {targets.shape} differ in shape")
    if predictions.size == 0:
        raise ValueError("mae_loss on empty input")
    return (predictions - targets).abs().mean()
