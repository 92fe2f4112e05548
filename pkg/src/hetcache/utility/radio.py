"""Point-wise link quantities under Rayleigh fading and full-buffer interference.

Pathloss ``L0 + 10*alpha*log10(r)`` is folded into an effective transmit power
``P' = P * 10**(-L0/10)`` so that the received power is ``P' h r**-alpha``.
Everything below works with the ratio ``n = sigma^2 / P'``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import quad_vec

from ..expint import scaled_e1

LN2 = math.log(2.0)
# relative gap below which two co-channel pathloss values are treated as equal
NEAR_EQUAL_RTOL = 1e-9
JITTER = 1e-6


class RadioError(ValueError):
    pass


@dataclass(frozen=True)
class RadioConfig:
    tx_power_dbm: float = 21.0
    noise_psd_dbm_hz: float = -174.0
    bandwidth_hz: float = 5e6
    backhaul_bps: float = 1e6
    pathloss_db: float = 35.5
    pathloss_exp: float = 3.76
    gamma0_db: float = -5.0

    def __post_init__(self):
        if not self.pathloss_exp > 2:
            raise RadioError("pathloss exponent must exceed 2")
        if not self.bandwidth_hz > 0:
            raise RadioError("bandwidth must be positive")
        if not self.backhaul_bps >= 0:
            raise RadioError("backhaul rate must be nonnegative")

    @property
    def noise_ratio(self) -> float:
        """sigma^2 / P' (noise power over pathloss-folded transmit power)."""
        noise_dbm = self.noise_psd_dbm_hz + 10.0 * math.log10(self.bandwidth_hz)
        return 10.0 ** ((noise_dbm - self.tx_power_dbm + self.pathloss_db) / 10.0)

    @property
    def gamma0(self) -> float:
        return 10.0 ** (self.gamma0_db / 10.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RadioConfig":
        return cls(**d)


def _pathloss(points: np.ndarray, bs_coords: np.ndarray, idx, alpha: float) -> np.ndarray:
    """``r**alpha`` from every point to each BS in ``idx``; shape (n, len(idx))."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    y = np.asarray(bs_coords, dtype=float)[np.atleast_1d(idx)]
    r = np.linalg.norm(pts[:, None, :] - y[None, :, :], axis=2)
    if np.any(r < 1e-12):
        raise RadioError("point coincides with a base station")
    return r**alpha


def _interferers(cochannel, serving: int) -> np.ndarray:
    return np.array([b for b in np.atleast_1d(cochannel) if b != serving], dtype=int)


def success_integrand(points, bs_coords, serving: int, cochannel, radio: RadioConfig, gamma0=None) -> np.ndarray:
    """P(SINR > gamma0) at fixed locations, averaged over fading only."""
    g = radio.gamma0 if gamma0 is None else np.asarray(gamma0, dtype=float)
    lam_s = _pathloss(points, bs_coords, serving, radio.pathloss_exp)[:, 0]
    # broadcasting over an optional trailing threshold axis
    g = np.asarray(g)
    if g.ndim:
        lam_s = lam_s[:, None]
    out = np.exp(-g * radio.noise_ratio * lam_s)
    others = _interferers(cochannel, serving)
    if len(others):
        lam_i = _pathloss(points, bs_coords, others, radio.pathloss_exp)
        for j in range(len(others)):
            li = lam_i[:, j][:, None] if g.ndim else lam_i[:, j]
            out = out / (1.0 + g * lam_s / li)
    return out


def _hypoexp_log_mean(lam: np.ndarray, n: float) -> np.ndarray:
    """E[ln(X + n)] - ln(n) for X a sum of independent Exp(rate lam_j), per row.

    ``lam`` must have pairwise distinct entries in each row.
    """
    m = lam.shape[1]
    total = np.zeros(lam.shape[0])
    h = scaled_e1(n * lam)
    for b in range(m):
        coef = np.ones(lam.shape[0])
        for c in range(m):
            if c != b:
                coef *= lam[:, c] / (lam[:, c] - lam[:, b])
        total += coef * h[:, b]
    return total


def _separate(lam: np.ndarray) -> tuple[np.ndarray, int]:
    if lam.shape[1] < 2:
        return lam, 0
    s = np.sort(lam, axis=1)
    close = np.any(np.diff(s, axis=1) <= NEAR_EQUAL_RTOL * s[:, 1:], axis=1)
    if not close.any():
        return lam, 0
    lam = lam.copy()
    lam[close] *= 1.0 + JITTER * np.arange(lam.shape[1])
    return lam, int(close.sum())


def conditional_rate(points, bs_coords, serving: int, cochannel, radio: RadioConfig, return_jitter: bool = False):
    """Ergodic rate ``W E[log2(1 + SINR)]`` at fixed locations.

    Uses ``ln(1 + S/(I+n)) = ln(S+I+n) - ln(I+n)``; both sums of independent
    exponentials are hypoexponential, whose log-moments have closed forms in
    the exponential integral.  The ``ln(n)`` terms of both parts cancel.
    """
    others = _interferers(cochannel, serving)
    idx = np.concatenate([[serving], others]).astype(int)
    lam = _pathloss(points, bs_coords, idx, radio.pathloss_exp)
    lam, n_jit = _separate(lam)
    n = radio.noise_ratio
    val = _hypoexp_log_mean(lam, n)
    if len(others):
        val = val - _hypoexp_log_mean(lam[:, 1:], n)
    rate = radio.bandwidth_hz * val / LN2
    return (rate, n_jit) if return_jitter else rate


def backhaul_rate(points, bs_coords, local: int, cochannel, radio: RadioConfig, epsrel: float = 1e-8) -> np.ndarray:
    """``E[min(W log2(1+SINR), C_bh)]`` from the local BS.

    Written as the integral of the tail probability over rate levels
    ``t in [0, C_bh]`` with threshold ``2**(t/W) - 1``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cap = radio.backhaul_bps
    if cap == 0:
        return np.zeros(len(pts))
    W = radio.bandwidth_hz

    def tail(t):
        return success_integrand(pts, bs_coords, local, cochannel, radio, gamma0=np.expm1(t * LN2 / W))

    if math.isinf(cap):
        # substitute the threshold so the range is [0, inf) in SINR units
        def f(g):
            return success_integrand(pts, bs_coords, local, cochannel, radio, gamma0=g) * (W / LN2) / (1.0 + g)

        res, _ = quad_vec(f, 0.0, np.inf, epsrel=epsrel)
        return res
    res, _ = quad_vec(tail, 0.0, cap, epsrel=epsrel)
    return res
