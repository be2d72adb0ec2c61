"""Signal-to-noise and error metrics."""

from __future__ import annotations

import math

import numpy as np

STANDARD = "standard"
LITERAL = "paper-literal"


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def snr_db(clean, estimate, mode: str = STANDARD) -> float:
    """S/N of ``estimate`` against the reference ``clean``, in dB.

    ``standard``: 10 log10(||X||^2 / ||X - X_hat||^2).
    ``paper-literal``: 20 log10(||X|| / ||X - X_hat||^2), the printed variant
    whose numerator and denominator carry different powers.
    A zero residual returns ``math.inf``.
    """
    x, xh = _pair(clean, estimate)
    if mode not in (STANDARD, LITERAL):
        raise ValueError(f"unknown S/N convention {mode!r}")
    sig = np.linalg.norm(x)
    if sig == 0:
        raise ValueError("clean reference is identically zero")
    res = np.linalg.norm(x - xh)
    if res == 0:
        return math.inf
    if mode == STANDARD:
        return float(20.0 * np.log10(sig / res))
    return float(20.0 * np.log10(sig / res**2))


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))
