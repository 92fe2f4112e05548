"""Adaptive cubature over triangles and convex polygons.

Each triangle is integrated with a collapsed Gauss-Jacobi x Gauss-Legendre
product rule; the error estimate is the difference between the rule on the
parent and the sum over its four midpoint children.  Triangles whose error
exceeds their area share of the tolerance are refined, all in one vectorised
integrand call per round.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .geometry import fan_triangles


class CubatureError(RuntimeError):
    pass


@lru_cache(maxsize=8)
def _reference_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes (barycentric a, b) and weights on the unit triangle (area 1/2)."""
    xj, wj = roots_jacobi(order, 1.0, 0.0)
    xl, wl = roots_legendre(order)
    u = (1.0 + xj) / 2.0
    wu = wj / 4.0  # (1-u) weight folded in: dx = du*2, (1-x) = 2(1-u)
    w = (1.0 + xl) / 2.0
    ww = wl / 2.0
    U, W = np.meshgrid(u, w, indexing="ij")
    a = U.ravel()
    b = ((1.0 - U) * W).ravel()
    wts = np.outer(wu, ww).ravel()
    return np.column_stack([a, b]), wts


@dataclass
class CubatureResult:
    value: np.ndarray
    error: np.ndarray
    n_triangles: int
    converged: bool


def _rule_on(tris: np.ndarray, fun, order: int) -> np.ndarray:
    nodes, wts = _reference_rule(order)
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    jac = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    pts = v0[:, None, :] + nodes[None, :, :1] * e1[:, None, :] + nodes[None, :, 1:] * e2[:, None, :]
    vals = np.asarray(fun(pts.reshape(-1, 2)))
    vals = vals.reshape(len(tris), len(wts), -1)
    return np.einsum("tnm,n,t->tm", vals, wts, jac)


def _split(tris: np.ndarray) -> np.ndarray:
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
    kids = np.stack(
        [np.stack([a, ab, ca], 1), np.stack([ab, b, bc], 1), np.stack([ca, bc, c], 1), np.stack([ab, bc, ca], 1)], 1
    )
    return kids.reshape(-1, 3, 2)


def integrate_triangles(
    fun: Callable[[np.ndarray], np.ndarray],
    tris: np.ndarray,
    rtol: float = 1e-6,
    atol: float = 0.0,
    order: int = 6,
    max_rounds: int = 14,
    max_triangles: int = 400_000,
) -> CubatureResult:
    """Integrate a (possibly vector-valued) function over a union of triangles.

    ``fun`` maps an ``(n, 2)`` array of points to ``(n,)`` or ``(n, m)`` values.
    The tolerance is applied per component: ``err <= max(atol, rtol*|I|)``.
    """
    tris = np.asarray(tris, dtype=float).reshape(-1, 3, 2)
    areas = lambda t: 0.5 * np.abs(  # noqa: E731
        (t[:, 1, 0] - t[:, 0, 0]) * (t[:, 2, 1] - t[:, 0, 1]) - (t[:, 1, 1] - t[:, 0, 1]) * (t[:, 2, 0] - t[:, 0, 0])
    )
    total_area = areas(tris).sum()
    coarse = _rule_on(tris, fun, order)
    done_val = np.zeros(coarse.shape[1])
    done_err = np.zeros(coarse.shape[1])
    active, active_val = tris, coarse
    n_tri = len(tris)
    for _ in range(max_rounds):
        kids = _split(active)
        kid_val = _rule_on(kids, fun, order)
        fine = kid_val.reshape(len(active), 4, -1).sum(axis=1)
        err = np.abs(fine - active_val)
        estimate = done_val + fine.sum(axis=0)
        tol = np.maximum(atol, rtol * np.abs(estimate))
        share = (areas(active) / total_area)[:, None] * tol[None, :]
        bad = np.any(err > share, axis=1)
        done_val += fine[~bad].sum(axis=0)
        done_err += err[~bad].sum(axis=0)
        if not bad.any():
            return CubatureResult(done_val, done_err, n_tri, True)
        if np.all(done_err + err[bad].sum(axis=0) <= tol):
            done_val += fine[bad].sum(axis=0)
            done_err += err[bad].sum(axis=0)
            return CubatureResult(done_val, done_err, n_tri, True)
        bad_kids = kids.reshape(len(active), 4, 3, 2)[bad].reshape(-1, 3, 2)
        active = bad_kids
        active_val = kid_val.reshape(len(bad), 4, -1)[bad].reshape(-1, kid_val.shape[1])
        n_tri += len(active)
        if n_tri > max_triangles:
            break
    done_val += active_val.sum(axis=0)
    done_err += err[bad].sum(axis=0)
    return CubatureResult(done_val, done_err, n_tri, False)


def integrate_polygon(fun, poly: np.ndarray, **kw) -> CubatureResult:
    return integrate_triangles(fun, fan_triangles(poly), **kw)
