"""Exhaustive and LP-based optima for tiny instances, used to check the solver."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from ..demand import DemandModel
from ..utility import UtilityTable, user_utilities
from .solve import CachingPolicy


class OracleError(ValueError):
    pass


@dataclass
class OracleResult:
    policy: CachingPolicy
    value: float  # (1 - eta) * network utility + eta * min user utility


def combined_utility(c, demand: DemandModel, table: UtilityTable, eta: float) -> float:
    tu = user_utilities(c, demand, table)
    return float((1.0 - eta) * (demand.v @ tu) + eta * tu.min())


def deterministic_oracle(demand: DemandModel, table: UtilityTable, n_cache: int, eta: float, max_vars: int = 8) -> OracleResult:
    """Best 0/1 placement with at most ``N_c`` files per BS, by enumeration."""
    nf, nb = demand.n_files, table.n_cells
    if nf * nb > max_vars:
        raise OracleError(f"{nf * nb} placement variables exceed the limit of {max_vars}")
    n = min(int(n_cache), nf)
    columns = []
    for size in range(n + 1):
        for files in itertools.combinations(range(nf), size):
            col = np.zeros(nf)
            col[list(files)] = 1.0
            columns.append(col)
    best = None
    for combo in itertools.product(columns, repeat=nb):
        c = np.column_stack(combo)
        val = combined_utility(c, demand, table, eta)
        if best is None or val > best[1] + 1e-12:
            best = (c, val)
    return OracleResult(CachingPolicy(best[0], n_cache), best[1])


def column_affine(c: np.ndarray, b: int, demand: DemandModel, table: UtilityTable) -> tuple[np.ndarray, np.ndarray]:
    """User utilities as ``alpha + beta @ c[:, b]`` with the other columns fixed.

    Each BS appears once in every region's order, so utilities are affine in
    a single column and unit perturbations recover the map exactly.
    """
    base = np.array(c, dtype=float)
    base[:, b] = 0.0
    alpha = user_utilities(base, demand, table)
    beta = np.empty((demand.n_users, demand.n_files))
    for f in range(demand.n_files):
        e = base.copy()
        e[f, b] = 1.0
        beta[:, f] = user_utilities(e, demand, table) - alpha
    return alpha, beta


def column_lp(c: np.ndarray, b: int, demand: DemandModel, table: UtilityTable, n_cache: float, eta: float) -> np.ndarray:
    """Exact best column ``b`` for fixed other columns (a linear program)."""
    alpha, beta = column_affine(c, b, demand, table)
    nf, nu = demand.n_files, demand.n_users
    # variables: column entries, then the min-utility epigraph s
    cost = np.append(-(1.0 - eta) * (demand.v @ beta), -eta)
    A_ub = [np.append(np.ones(nf), 0.0)]
    b_ub = [n_cache]
    if eta > 0:
        A_ub.extend(np.hstack([-beta, np.ones((nu, 1))]))
        b_ub.extend(alpha)
    bounds = [(0.0, 1.0)] * nf + [(None, None) if eta > 0 else (0.0, 0.0)]
    res = linprog(cost, A_ub=np.array(A_ub), b_ub=np.array(b_ub), bounds=bounds, method="highs")
    if res.status != 0:
        raise OracleError(f"column LP failed: {res.message}")
    out = np.array(c, dtype=float)
    out[:, b] = np.clip(res.x[:nf], 0.0, 1.0)
    return out


def block_ascent(c: np.ndarray, demand: DemandModel, table: UtilityTable, n_cache: float, eta: float, tol: float = 1e-10, max_sweeps: int = 200) -> np.ndarray:
    """Cycle exact column LPs until the objective stops improving."""
    c = np.array(c, dtype=float)
    val = combined_utility(c, demand, table, eta)
    for _ in range(max_sweeps):
        for b in range(table.n_cells):
            c = column_lp(c, b, demand, table, n_cache, eta)
        new = combined_utility(c, demand, table, eta)
        if new <= val + tol:
            break
        val = new
    return c


def _simplex_grid(n: int, budget: float, step: float):
    m = int(round(1.0 / step))
    cap = int(np.floor(budget * m + 1e-9))
    for pt in itertools.product(range(m + 1), repeat=n):
        if sum(pt) <= cap:
            yield np.array(pt, dtype=float) / m


def grid_lp_oracle(demand: DemandModel, table: UtilityTable, n_cache: float, eta: float, step: float = 0.1, refine: int = 10) -> OracleResult:
    """Global optimum for one or two BSs.

    One BS: a single exact LP.  Two BSs: grid over the first column, exact LP
    for the second, then block ascent from the ``refine`` best grid points.
    """
    nf, nb = demand.n_files, table.n_cells
    if nb > 2 or nf > 4:
        raise OracleError("grid/LP oracle handles at most 2 BSs and 4 files")
    if nb == 1:
        c = column_lp(np.zeros((nf, 1)), 0, demand, table, n_cache, eta)
        return OracleResult(CachingPolicy(c, n_cache), combined_utility(c, demand, table, eta))
    scored = []
    for col in _simplex_grid(nf, min(n_cache, nf), step):
        c = np.column_stack([col, np.zeros(nf)])
        c = column_lp(c, 1, demand, table, n_cache, eta)
        scored.append((combined_utility(c, demand, table, eta), c))
    scored.sort(key=lambda t: -t[0])
    best_c, best_val = scored[0][1], scored[0][0]
    for _, c in scored[:refine]:
        c = block_ascent(c, demand, table, n_cache, eta)
        val = combined_utility(c, demand, table, eta)
        if val > best_val:
            best_c, best_val = c, val
    return OracleResult(CachingPolicy(best_c, n_cache), best_val)


def brute_force_policy(demand: DemandModel, table: UtilityTable, n_cache: float, eta: float, grid_step: float = 0.1) -> OracleResult:
    """Exhaustive deterministic search for ``eta = 0``, grid/LP search otherwise."""
    if eta == 0:
        return deterministic_oracle(demand, table, int(n_cache), eta)
    return grid_lp_oracle(demand, table, n_cache, eta, step=grid_step)
