"""Compound running-median smoother 4253H, applied twice (residual re-smoothing).

Every stage copies input values at positions where its window does not fit.
"""

from __future__ import annotations

import numpy as np


def running_median(x: np.ndarray, span: int) -> np.ndarray:
    """Odd-span running median; the ``span // 2`` values at each end are copied."""
    x = np.asarray(x, dtype=np.float64)
    h = span // 2
    out = x.copy()
    if len(x) < span:
        return out
    windows = np.lib.stride_tricks.sliding_window_view(x, span)
    out[h : len(x) - h] = np.median(windows, axis=1)
    return out


def median_4_2(x: np.ndarray) -> np.ndarray:
    """Running median of 4 (values fall between samples) re-centred by a running median of 2."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    if len(x) < 5:
        return out
    between = np.median(np.lib.stride_tricks.sliding_window_view(x, 4), axis=1)
    out[2 : len(x) - 2] = 0.5 * (between[:-1] + between[1:])
    return out


def hanning(x: np.ndarray) -> np.ndarray:
    """Weights (1/4, 1/2, 1/4); end values copied."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    if len(x) >= 3:
        out[1:-1] = 0.25 * x[:-2] + 0.5 * x[1:-1] + 0.25 * x[2:]
    return out


def smooth_4253h(x) -> np.ndarray:
    return hanning(running_median(running_median(median_4_2(x), 5), 3))


def smooth_4253h_twice(series) -> np.ndarray:
    """4253H smooth plus the 4253H smooth of its residuals."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D series")
    if x.size == 0:
        raise ValueError("cannot smooth an empty series")
    if x.size < 5:
        return x.copy()
    smooth = smooth_4253h(x)
    return smooth + smooth_4253h(x - smooth)
