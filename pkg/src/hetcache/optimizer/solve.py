"""Successive geometric-programming solve of the caching problem."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize

from ..demand import DemandModel
from ..utility import UtilityTable, min_utility, network_utility
from .gp import GpSolveError, solve_barrier
from .sp import SpProblem, build_sp, condense_gp, starting_point

BUDGET_TOL = 1e-6
ROUND_TOL = 1e-4
MONOTONE_SLACK = 1e-8


class PolicyError(ValueError):
    pass


@dataclass
class CachingPolicy:
    """Caching probabilities ``c[f, b]`` with a per-BS budget."""

    c: np.ndarray
    n_cache: float

    def __post_init__(self):
        self.c = np.atleast_2d(np.asarray(self.c, dtype=float))

    @property
    def n_files(self) -> int:
        return self.c.shape[0]

    @property
    def n_bs(self) -> int:
        return self.c.shape[1]

    def validate(self, tol: float = BUDGET_TOL) -> "CachingPolicy":
        if np.any(self.c < -1e-12) or np.any(self.c > 1 + 1e-12):
            raise PolicyError("caching probabilities must lie in [0, 1]")
        over = self.c.sum(axis=0) - self.n_cache
        if np.any(over > tol):
            raise PolicyError(f"cache budget exceeded by {over.max():.3g}")
        return self

    def rounded(self, tol: float = ROUND_TOL) -> "CachingPolicy":
        """Snap entries within ``tol`` of 0 or 1 without breaking the budget.

        Mass added by snapping up is taken from the column's remaining
        fractional entries; if there are none the snap is undone.
        """
        c = self.c.copy()
        c[c <= tol] = 0.0
        for b in range(c.shape[1]):
            col = c[:, b]
            before = col.copy()
            col[col >= 1 - tol] = 1.0
            excess = col.sum() - self.n_cache
            if excess <= 0:
                continue
            frac = (col > 0) & (col < 1)
            if col[frac].sum() >= excess:
                col[frac] -= excess * col[frac] / col[frac].sum()
            else:
                col[:] = before
        return CachingPolicy(c, self.n_cache)


@dataclass
class SolverTrace:
    objective: list[float] = field(default_factory=list)
    max_violation: list[float] = field(default_factory=list)
    step_norm: list[float] = field(default_factory=list)
    newton_steps: list[int] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)
    converged: bool = False
    failure: str = ""

    @property
    def n_iter(self) -> int:
        return len(self.step_norm)

    def is_monotone(self, slack: float = MONOTONE_SLACK) -> bool:
        obj = np.asarray(self.objective)
        return bool(np.all(np.diff(obj) <= slack * np.maximum(1.0, np.abs(obj[:-1]))))

    def rows(self) -> list[dict]:
        out = []
        for n, obj in enumerate(self.objective):
            out.append({
                "iteration": n,
                "objective": obj,
                "step_norm": self.step_norm[n - 1] if n > 0 else float("nan"),
                "max_violation": self.max_violation[n],
            })
        return out


@dataclass
class SolveResult:
    policy: CachingPolicy
    trace: SolverTrace
    problem: SpProblem
    network_utility: float
    min_utility: float
    min_user: int

    @property
    def converged(self) -> bool:
        return self.trace.converged


def _violation(problem: SpProblem, z: np.ndarray) -> float:
    c = 1.0 - z
    over = np.clip(c.sum(axis=0) - problem.n_cache, 0, None).max(initial=0.0)
    bounds = max(0.0, float((problem.z_min - z).max()), float((z - 1).max()))
    return float(max(over, bounds))


def _project_budget(problem: SpProblem, z: np.ndarray) -> np.ndarray:
    """Rescale every column of ``z`` so that its cache budget is exactly used."""
    target = problem.n_files - problem.n_cache
    out = z.copy()
    for b in range(z.shape[1]):
        col = z[:, b]

        def excess(k):
            return np.clip(col * np.exp(k), problem.z_min, 1.0).sum() - target

        if abs(excess(0.0)) <= 1e-13 * target:
            continue
        k = brentq(excess, -60.0, 60.0, xtol=1e-15)
        out[:, b] = np.clip(col * np.exp(k), problem.z_min, 1.0)
        # never end up below the budget because of the root tolerance
        if out[:, b].sum() < target:
            out[:, b] = np.clip(col * np.exp(k + 1e-14), problem.z_min, 1.0)
    return out


def _feasible(problem: SpProblem, z: np.ndarray) -> bool:
    if problem.n_cache >= problem.n_files:
        return True
    return bool(np.all(z.sum(axis=0) >= (problem.n_files - problem.n_cache) * (1 - 1e-12)))


def _extrapolate(problem: SpProblem, z_old: np.ndarray, z_new: np.ndarray, obj: float, max_doublings: int = 16):
    lo = np.log(problem.z_min) * (1 - 1e-12)
    y0, d = np.log(z_old), np.log(z_new) - np.log(z_old)
    best_z, best_obj = z_new, obj
    budget = problem.n_cache < problem.n_files
    omega = 1.0
    for _ in range(max_doublings):
        z_line = np.exp(np.clip(y0 + omega * d, lo, -1e-12))
        cands = [z_line] if omega > 1 else []
        if budget:
            cands.append(np.clip(_project_budget(problem, z_line), problem.z_min * (1 + 1e-9), 1 - 1e-12))
        # the objective is not unimodal along the line, so scan every length
        for z_try in cands:
            if not _feasible(problem, z_try):
                continue
            obj_try = problem.objective(z_try)
            if obj_try < best_obj:
                best_z, best_obj = z_try, obj_try
        omega *= 2.0
    return best_z, best_obj


def _loss_jacobian(problem: SpProblem, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """User losses and their derivatives ``d g_u / d z_fb``, shape ``(u, f, b)``."""
    mono = problem.monomials(z)
    weighted = problem.coef * mono[None]
    losses = weighted.sum(axis=(1, 2))
    jac = (weighted @ problem.set_matrix) / z[None]
    return losses, jac


def _polish(problem: SpProblem, z: np.ndarray, max_iter: int = 500) -> np.ndarray | None:
    """Local SQP refinement of the exact problem in ``c = 1 - z``.

    Uses the epigraph form of the max term.  Returns a budget-feasible point
    or ``None`` when SLSQP produced nothing usable.
    """
    nf, nb, nu = problem.n_files, problem.n_bs, problem.n_users
    n = nf * nb
    eta = problem.eta
    cache: dict = {}

    def parts(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            zz = np.clip(1.0 - x[:n].reshape(nf, nb), problem.z_min, 1.0)
            cache[key] = _loss_jacobian(problem, zz)
        return cache[key]

    def fun(x):
        L, J = parts(x)
        grad = np.empty(n + 1)
        grad[:n] = -(1.0 - eta) * np.tensordot(problem.v, J, axes=1).ravel()
        grad[n] = eta
        return (1.0 - eta) * float(problem.v @ L) + eta * x[n], grad

    budget_jac = np.zeros((nb, n + 1))
    for b in range(nb):
        budget_jac[b, np.arange(nf) * nb + b] = -1.0
    cons = [{
        "type": "ineq",
        "fun": lambda x: problem.n_cache - x[:n].reshape(nf, nb).sum(axis=0),
        "jac": lambda x: budget_jac,
    }]
    if eta > 0:
        def fair_jac(x):
            J = np.ones((nu, n + 1))
            J[:, :n] = parts(x)[1].reshape(nu, n)
            return J

        cons.append({"type": "ineq", "fun": lambda x: x[n] - parts(x)[0] - problem.shift, "jac": fair_jac})
    x0 = np.append((1.0 - z).ravel(), np.max(problem.fairness_values(z)))
    bounds = [(0.0, 1.0 - problem.z_min)] * n + [(None, None)]
    try:
        res = minimize(fun, x0, jac=True, method="SLSQP", bounds=bounds, constraints=cons,
                       options={"maxiter": max_iter, "ftol": 1e-12})
    except (ValueError, np.linalg.LinAlgError):
        return None
    if not np.all(np.isfinite(res.x)):
        return None
    zz = np.clip(1.0 - res.x[:n].reshape(nf, nb), problem.z_min, 1.0)
    if problem.n_cache < nf:
        zz = _project_budget(problem, zz)
    return zz


def solve_p0(
    demand: DemandModel,
    table: UtilityTable,
    n_cache: float,
    eta: float,
    tol: float = 1e-4,
    max_iter: int = 50,
    c0: np.ndarray | None = None,
    form: str = "consecutive",
    negative: str = "error",
    gap_tol: float = 1e-9,
    round_output: bool = True,
    extrapolate: bool = False,
    polish: bool = True,
    polish_rtol: float = 1e-2,
) -> SolveResult:
    """Maximise ``(1 - eta) * network utility + eta * min user utility``.

    Starts from ``c = N_c / N_f`` everywhere unless ``c0`` is given and, at
    every outer step, re-condenses around the current point and solves the
    resulting convex program.  Stops when the Euclidean change in ``z`` is at
    most ``tol``.  If ``max_iter`` is reached the best iterate is returned
    with ``trace.converged = False``.

    With ``extrapolate`` the step in ``log z`` is also tried at lengths
    ``2, 4, ..., 2**16`` and the best point is kept.  Near a vertex the plain iteration moves
    ratios of ``z`` by a constant factor per step, so this removes most of the
    outer iterations.  Each extrapolated point is also rescaled per BS so
    that the cache budget is used exactly.  It is off by default: it tends
    to lock in early placement decisions and settle on a worse vertex.

    With ``polish``, once an outer step lowers the objective by less than
    ``polish_rtol`` (relative), the iterate is refined by a local SQP solve of
    the exact problem.  Starting it earlier tends to settle in a worse local
    optimum.  Near fractional optima (typical for ``eta > 0``) the
    successive approximation alone creeps along a curved path and needs
    hundreds of iterations; a refined point is a fixed point of the next
    condensed solve, so the step-norm test then ends the loop.

    A candidate from either acceleration is accepted only if it respects the
    budget and lowers the objective, so the trace stays monotone.

    If an inner convex solve fails after the first outer step, the loop stops
    and the best iterate so far is returned, unconverged, with the error in
    ``trace.failure``.
    """
    problem = build_sp(demand, table, n_cache, eta, form=form, negative=negative)
    nf, nb = problem.n_files, problem.n_bs
    trace = SolverTrace()

    def finish(z):
        c = np.clip(1.0 - z, 0.0, 1.0)
        pol = CachingPolicy(c, n_cache)
        if round_output:
            pol = pol.rounded()
        pol.validate()
        tn = network_utility(pol.c, demand, table)
        tm, um = min_utility(pol.c, demand, table)
        return SolveResult(pol, trace, problem, tn, tm, um)

    if n_cache <= 0:
        trace.converged = True
        z = np.ones((nf, nb))
        trace.objective.append(problem.objective(z))
        trace.max_violation.append(0.0)
        return finish(z)

    if c0 is None:
        z = np.full((nf, nb), max(1.0 - n_cache / nf, 0.0))
    else:
        z = 1.0 - np.asarray(c0, dtype=float).reshape(nf, nb)
    z = np.clip(z, problem.z_min, 1.0)
    # keep the start strictly inside the box
    z = np.clip(z, problem.z_min * 1.5, 1.0 - 1e-9)
    best_z, best_obj = z, problem.objective(z)
    trace.objective.append(best_obj)
    trace.max_violation.append(_violation(problem, z))
    for _ in range(max_iter):
        sub = condense_gp(problem, z)
        x0 = starting_point(problem, sub, z)
        shrink = 1e-3
        try:
            while True:
                try:
                    res = solve_barrier(sub.objective, sub.constraints, sub.lower, sub.upper, x0, gap_tol=gap_tol)
                    break
                except GpSolveError as err:
                    if "strictly feasible" not in str(err) or shrink > 0.5:
                        raise
                    shrink *= 4
                    x0 = starting_point(problem, sub, z, shrink=shrink)
        except GpSolveError as err:
            if not trace.step_norm:
                raise
            trace.failure = str(err)
            break
        z_new = np.exp(res.x[: sub.n_z]).reshape(nf, nb)
        obj = problem.objective(z_new)
        if extrapolate:
            z_new, obj = _extrapolate(problem, z, z_new, obj)
        slow = (trace.objective[-1] - obj) <= polish_rtol * max(abs(obj), 1e-12)
        if polish and slow:
            z_pol = _polish(problem, z_new)
            if z_pol is not None and _feasible(problem, z_pol):
                obj_pol = problem.objective(z_pol)
                if obj_pol < obj:
                    z_new, obj = z_pol, obj_pol
        step = float(np.linalg.norm(z_new - z))
        trace.objective.append(obj)
        trace.max_violation.append(_violation(problem, z_new))
        trace.step_norm.append(step)
        trace.newton_steps.append(res.newton_steps)
        trace.weights.append(sub.cache_weights)
        z = z_new
        if obj <= best_obj:
            best_z, best_obj = z, obj
        if step <= tol:
            trace.converged = True
            break
    return finish(z if trace.converged else best_z)
