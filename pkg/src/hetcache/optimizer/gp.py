"""Barrier method for geometric programs in log variables.

Every function handled here has the form ``log sum_j exp(a_j.x + c_j) - (g.x + h)``:
a posynomial in log coordinates divided by a monomial.  This covers the
objective, posynomial constraints and the monomial (condensed) constraints
of the successive approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp


class GpSolveError(RuntimeError):
    def __init__(self, msg: str, dump: dict | None = None):
        super().__init__(msg)
        self.dump = dump or {}


@dataclass
class LogSumExpAffine:
    """``f(x) = log(sum_j exp(A[j] @ x + c[j])) - (g @ x + h)``."""

    A: sp.csr_matrix
    c: np.ndarray
    g: np.ndarray | None = None
    h: float = 0.0

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A)
        self.c = np.asarray(self.c, dtype=float)
        if self.A.shape[0] != len(self.c):
            raise ValueError("one offset per term required")

    def _lin(self, x):
        return (self.g @ x + self.h) if self.g is not None else self.h

    def value(self, x: np.ndarray) -> float:
        e = self.A @ x + self.c
        m = e.max()
        return float(m + np.log(np.exp(e - m).sum()) - self._lin(x))

    def derivatives(self, x: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        e = self.A @ x + self.c
        m = e.max()
        p = np.exp(e - m)
        s = p.sum()
        w = p / s
        val = float(m + np.log(s) - self._lin(x))
        aw = self.A.T @ w
        grad = aw - self.g if self.g is not None else aw
        H = (self.A.T @ sp.diags(w) @ self.A).toarray() - np.outer(aw, aw)
        return val, np.asarray(grad).ravel(), H


def condense(A: sp.csr_matrix, c: np.ndarray, x0: np.ndarray) -> tuple[np.ndarray, float]:
    """Monomial lower bound of ``sum_j exp(A_j x + c_j)``, tight at ``x0``.

    Weighted arithmetic-geometric mean inequality with weights equal to each
    term's share at ``x0``.  Returns ``(g, h)`` such that the log of the
    monomial is ``g @ x + h``.
    """
    A = sp.csr_matrix(A)
    e = A @ x0 + c
    m = e.max()
    p = np.exp(e - m)
    beta = p / p.sum()
    keep = beta > 0
    g = np.asarray(A[keep].T @ beta[keep]).ravel()
    h = float(np.sum(beta[keep] * (c[keep] - np.log(beta[keep]))))
    return g, h


class _Stack:
    """Several ``LogSumExpAffine`` functions evaluated together.

    Terms of all functions are stacked into one sparse matrix and reduced
    per segment, so one Newton step costs a handful of sparse products
    regardless of how many constraints there are.
    """

    def __init__(self, funcs: list[LogSumExpAffine], n: int):
        self.n = n
        self.m = len(funcs)
        sizes = np.array([f.A.shape[0] for f in funcs], dtype=int)
        if np.any(sizes == 0):
            raise ValueError("every function needs at least one term")
        self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
        self.seg = np.repeat(np.arange(self.m), sizes)
        self.A = sp.vstack([f.A for f in funcs], format="csr") if funcs else sp.csr_matrix((0, n))
        self.c = np.concatenate([f.c for f in funcs]) if funcs else np.zeros(0)
        self.G = np.array([f.g if f.g is not None else np.zeros(n) for f in funcs]).reshape(self.m, n)
        self.h = np.array([f.h for f in funcs], dtype=float)
        coo = self.A.tocoo()
        self.rows, self.cols, self.vals = coo.row, coo.col, coo.data
        # flat (function, variable) slot of every nonzero, for per-function gradients
        self.grad_slot = self.seg[self.rows] * n + self.cols
        self._pairs()

    def _pairs(self):
        """Index pairs of nonzeros sharing a row: the support of each term's Hessian."""
        A = self.A
        counts = np.diff(A.indptr)
        pr, pi, pj, pv = [], [], [], []
        for k in np.unique(counts):
            if k == 0:
                continue
            rows = np.flatnonzero(counts == k)
            base = A.indptr[rows][:, None] + np.arange(k)[None, :]  # rows x k positions
            idx = A.indices[base]
            val = A.data[base]
            pr.append(np.repeat(rows, k * k))
            pi.append(np.repeat(idx, k, axis=1).ravel())
            pj.append(np.tile(idx, (1, k)).ravel())
            pv.append((val[:, :, None] * val[:, None, :]).ravel())
        cat = (lambda xs, dt: np.concatenate(xs).astype(dt)) if pr else (lambda xs, dt: np.zeros(0, dt))
        self.pair_row = cat(pr, int)
        self.pair_slot = cat(pi, int) * self.n + cat(pj, int)
        self.pair_val = cat(pv, float)

    def _lse(self, x):
        e = self.A @ x + self.c
        mx = np.maximum.reduceat(e, self.starts)
        p = np.exp(e - mx[self.seg])
        s = np.add.reduceat(p, self.starts)
        return mx + np.log(s), p / s[self.seg]

    def values(self, x):
        if self.m == 0:
            return np.zeros(0)
        return self._lse(x)[0] - (self.G @ x + self.h)

    def derivatives(self, x):
        """Values, gradients ``(m, n)`` and per-term weights."""
        lse, w = self._lse(x)
        aw = np.bincount(self.grad_slot, weights=w[self.rows] * self.vals, minlength=self.m * self.n).astype(float).reshape(self.m, self.n)
        return lse - (self.G @ x + self.h), aw - self.G, aw, w

    def weighted_hessian(self, x, scale):
        """``sum_i scale_i * hess f_i(x)`` and the matching values/gradients."""
        vals, grads, aw, w = self.derivatives(x)
        omega = (w * scale[self.seg])[self.pair_row] * self.pair_val
        H = np.bincount(self.pair_slot, weights=omega, minlength=self.n * self.n).astype(float).reshape(self.n, self.n)
        H -= aw.T @ (aw * scale[:, None])
        return vals, grads, H


@dataclass
class BarrierResult:
    x: np.ndarray
    value: float
    gap: float
    newton_steps: int
    history: list = field(default_factory=list)


def solve_barrier(
    objective: LogSumExpAffine,
    constraints: list[LogSumExpAffine],
    lower: np.ndarray,
    upper: np.ndarray,
    x0: np.ndarray,
    gap_tol: float = 1e-9,
    mu: float = 20.0,
    t0: float = 1.0,
    max_newton: int = 2000,
) -> BarrierResult:
    """Minimise ``objective`` subject to ``f_i(x) <= 0`` and ``lower < x < upper``.

    ``x0`` must be strictly feasible.  Log-barrier path following with damped
    Newton centering; stops when the barrier duality gap ``m / t`` is at most
    ``gap_tol``.
    """
    x = np.array(x0, dtype=float)
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    has_lo = np.isfinite(lo)
    has_hi = np.isfinite(hi)
    m = len(constraints) + int(has_lo.sum() + has_hi.sum())
    n = len(x)

    cons = _Stack(constraints, n)
    obj = _Stack([objective], n)

    def slacks(x):
        fs = cons.values(x)
        return fs, x[has_lo] - lo[has_lo], hi[has_hi] - x[has_hi]

    def strictly_feasible(x):
        fs, sl, sh = slacks(x)
        return bool(np.all(fs < 0) and np.all(sl > 0) and np.all(sh > 0))

    def phi(t, x):
        fs, sl, sh = slacks(x)
        if np.any(fs >= 0) or np.any(sl <= 0) or np.any(sh <= 0):
            return np.inf
        return t * objective.value(x) - np.log(-fs).sum() - np.log(sl).sum() - np.log(sh).sum()

    if not strictly_feasible(x):
        fs, sl, sh = slacks(x)
        raise GpSolveError(
            "starting point is not strictly feasible",
            {"x": x.copy(), "constraints": fs, "lower_slack_min": sl.min(initial=np.inf), "upper_slack_min": sh.min(initial=np.inf)},
        )

    t = t0
    steps = 0
    history = []
    while True:
        # centering
        first = steps
        for _ in range(max_newton):
            _, g0, H = obj.weighted_hessian(x, np.array([t]))
            grad = t * g0[0]
            if cons.m:
                fs = cons.values(x)
                inv = 1.0 / -fs
                _, gs, Hc = cons.weighted_hessian(x, inv)
                grad += gs.T @ inv
                H += Hc + gs.T @ (gs * inv[:, None] ** 2)
            dl = np.zeros(n)
            dh = np.zeros(n)
            dl[has_lo] = 1.0 / (x[has_lo] - lo[has_lo])
            dh[has_hi] = 1.0 / (hi[has_hi] - x[has_hi])
            grad += -dl + dh
            H[np.diag_indices(n)] += dl**2 + dh**2
            try:
                cf = scipy.linalg.cho_factor(H, check_finite=False)
                dx = -scipy.linalg.cho_solve(cf, grad, check_finite=False)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                dx = -np.linalg.lstsq(H, grad, rcond=None)[0]
            lam2 = float(-grad @ dx)
            steps += 1
            if lam2 / 2 <= 1e-8:
                break
            # the step is below the resolution of x: nothing left to gain
            if np.max(np.abs(dx)) <= 1e-10 * max(1.0, np.max(np.abs(x))):
                break
            cur = phi(t, x)
            alpha = 1.0
            while alpha > 1e-14:
                val = phi(t, x + alpha * dx)
                if val <= cur - 0.01 * alpha * lam2:
                    break
                alpha *= 0.5
            else:
                if lam2 / 2 <= 1e-6:
                    break  # at the numerical floor of this centering problem
                raise GpSolveError(
                    "line search failed",
                    {"x": x.copy(), "t": t, "newton_decrement_sq": lam2, "objective": objective.value(x)},
                )
            x_new = x + alpha * dx
            moved = np.max(np.abs(x_new - x)) > 1e-13 * max(1.0, np.max(np.abs(x)))
            x = x_new
            if not moved:
                break
        else:
            raise GpSolveError("centering did not converge", {"x": x.copy(), "t": t})
        gap = m / t
        history.append((t, objective.value(x), gap, steps - first))
        if gap <= gap_tol:
            return BarrierResult(x, objective.value(x), gap, steps, history)
        t *= mu
