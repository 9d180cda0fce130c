"""Canonical double-gamma haemodynamic response and causal convolution."""

from __future__ import annotations

import math

import numpy as np


def _gamma_pdf(t: np.ndarray, shape: float, scale: float = 1.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    pos = t > 0
    tp = t[pos] / scale
    out[pos] = np.exp((shape - 1) * np.log(tp) - tp - math.lgamma(shape)) / scale
    return out


def double_gamma(t: np.ndarray, peak: float = 6.0, undershoot: float = 16.0, ratio: float = 1 / 6) -> np.ndarray:
    """Unnormalised SPM-style response ``g(t;6,1) - g(t;16,1)/6``."""
    return _gamma_pdf(t, peak) - ratio * _gamma_pdf(t, undershoot)


def hrf_kernel(tr: float, length_s: float = 32.0) -> np.ndarray:
    """Double-gamma HRF sampled every ``tr`` seconds over ``[0, length_s)``, unit sum."""
    if tr <= 0:
        raise ValueError(f"tr must be positive, got {tr}")
    n = max(int(math.ceil(length_s / tr)), 1)
    h = double_gamma(np.arange(n) * tr)
    s = h.sum()
    if n == 1 or s == 0:
        return np.ones(1)
    return h / s


def convolve_predictions(pred: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Causal convolution of each column of ``pred`` (``T x P``) with ``kernel``, zero-padded head."""
    pred = np.asarray(pred)
    kernel = np.asarray(kernel, dtype=np.float64).reshape(-1)
    squeeze = pred.ndim == 1
    x = pred[:, None] if squeeze else pred
    out = np.zeros(x.shape, dtype=np.result_type(x.dtype, np.float64))
    n = len(x)
    for j in range(min(len(kernel), n)):
        out[j:] += kernel[j] * x[: n - j]
    out = out.astype(pred.dtype if pred.dtype.kind == "f" else np.float64, copy=False)
    return out[:, 0] if squeeze else out
