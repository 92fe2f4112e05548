"""Exponential integral for negative arguments.

``Ei(x) = -E1(-x)`` for ``x < 0``.  The power series is used for ``|x| <= 6``
and the continued fraction (modified Lentz, fixed depth) beyond.
"""

from __future__ import annotations

import numpy as np

EULER_GAMMA = 0.57721566490153286061
_SERIES_MAX = 6.0
_SERIES_TERMS = 70
_CF_TERMS = 60


def _e1_series(t: np.ndarray) -> np.ndarray:
    total = np.zeros_like(t)
    term = np.ones_like(t)
    for n in range(1, _SERIES_TERMS + 1):
        term = term * (-t) / n
        total += term / n
    return -EULER_GAMMA - np.log(t) - total


def _scaled_e1_cf(t: np.ndarray) -> np.ndarray:
    # e^t E1(t) = 1/(t+1-1/(t+3-4/(t+5-...)))
    tiny = 1e-300
    b = t + 1.0
    c = np.full_like(t, 1.0 / tiny)
    d = 1.0 / b
    h = d.copy()
    for i in range(1, _CF_TERMS + 1):
        an = -float(i * i)
        b = b + 2.0
        d = 1.0 / (an * d + b)
        c = b + an / c
        h = h * c * d
    return h


def scaled_e1(t) -> np.ndarray:
    """``exp(t) * E1(t)`` for ``t > 0``, stable for large ``t``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("scaled_e1 needs t > 0")
    out = np.empty_like(t)
    small = t <= _SERIES_MAX
    if np.any(small):
        ts = t[small]
        out[small] = np.exp(ts) * _e1_series(ts)
    if np.any(~small):
        out[~small] = _scaled_e1_cf(t[~small])
    return out


def e1(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("E1 needs t > 0")
    out = np.empty_like(t)
    small = t <= _SERIES_MAX
    out[small] = _e1_series(t[small])
    out[~small] = np.exp(-t[~small]) * _scaled_e1_cf(t[~small])
    return out


def exp_integral(x):
    """Ei(x) for x < 0.

    >>> round(float(exp_integral(-1.0)), 7)
    -0.2193839
    """
    x = np.asarray(x, dtype=float)
    if np.any(x >= 0):
        raise ValueError("exp_integral is only defined here for x < 0")
    out = -e1(-x)
    return out if out.ndim else float(out)
