"""Caching problem as a signomial program in the miss probabilities ``z = 1 - c``.

Expanding the per-region utility of a file gives

    U = T_1 - sum_k (T_k - T_{k+1}) * prod_{l<=k} z_{f, b_l}

with ``T_{K+1}`` the backhaul value.  Minimising the weighted sum of the
products is therefore equivalent to maximising utility.  Products over the
same BS set are merged, so the problem is described by one coefficient per
(user, file, BS set).

Negative coefficients appear when a farther BS is better than a nearer one
(e.g. an interference-free BS behind an interfered one).  By default they
raise an error.  ``negative="keep"`` moves them to the other side of the
inequality and condenses them like the cache-size constraint, which keeps
every subproblem a geometric program; ``negative="clamp"`` drops them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..demand import DemandModel
from ..utility import UtilityTable, location_weights
from .gp import LogSumExpAffine, condense

Z_MIN = 1e-6
NEG_TOL = 1e-9
DIFFERENCE_FORMS = ("consecutive", "backhaul")
# positive offset keeping the auxiliary variables away from zero
_AUX_MARGIN = 1e-3


class SpError(ValueError):
    pass


@dataclass
class SpProblem:
    """Signomial caching problem in normalised utility units.

    ``g_u(z) = sum_{f,s} coef[u, f, s] * prod_{b in sets[s]} z[f, b]`` is the
    utility loss of user u relative to ``const[u]``, so that
    ``T_u = scale * (const[u] - g_u(z))``.
    """

    sets: tuple[tuple[int, ...], ...]
    set_matrix: np.ndarray
    coef: np.ndarray
    const: np.ndarray
    v: np.ndarray
    eta: float
    n_cache: float
    scale: float
    z_min: float = Z_MIN
    form: str = "consecutive"
    n_clamped: int = 0

    @property
    def n_users(self) -> int:
        return self.coef.shape[0]

    @property
    def n_files(self) -> int:
        return self.coef.shape[1]

    @property
    def n_bs(self) -> int:
        return self.set_matrix.shape[1]

    @property
    def shift(self) -> np.ndarray:
        """Per-user constant making every user comparable against one ``t``."""
        return self.const.max() - self.const

    @property
    def network_coef(self) -> np.ndarray:
        return np.einsum("u,ufs->fs", self.v, self.coef)

    def monomials(self, z: np.ndarray) -> np.ndarray:
        logz = np.log(np.clip(np.asarray(z, dtype=float).reshape(self.n_files, self.n_bs), 1e-300, None))
        return np.exp(logz @ self.set_matrix.T)

    def user_losses(self, z) -> np.ndarray:
        return np.einsum("ufs,fs->u", self.coef, self.monomials(z))

    def fairness_values(self, z) -> np.ndarray:
        return self.user_losses(z) + self.shift

    def objective(self, z) -> float:
        """``(1 - eta) * sum_u v_u g_u + eta * max_u (g_u + shift_u)``."""
        g = self.user_losses(z)
        val = (1.0 - self.eta) * float(self.v @ g)
        if self.eta > 0:
            val += self.eta * float(np.max(g + self.shift))
        return val

    def user_utilities(self, z) -> np.ndarray:
        return self.scale * (self.const - self.user_losses(z))


def prefix_sets(table: UtilityTable) -> tuple[tuple[tuple[int, ...], ...], np.ndarray]:
    """Distinct BS prefix sets and the set index of every (region, rank)."""
    index: dict[tuple[int, ...], int] = {}
    where = np.empty(table.order.shape, dtype=int)
    for r, order in enumerate(table.order):
        for k in range(table.K):
            key = tuple(sorted(int(b) for b in order[: k + 1]))
            where[r, k] = index.setdefault(key, len(index))
    sets = tuple(sorted(index, key=index.get))
    return sets, where


def build_sp(
    demand: DemandModel,
    table: UtilityTable,
    n_cache: float,
    eta: float,
    form: str = "consecutive",
    negative: str = "error",
    z_min: float = Z_MIN,
) -> SpProblem:
    """Assemble the signomial program for a demand model and utility table.

    Parameters
    ----------
    form : {"consecutive", "backhaul"}
        Difference used as product coefficient.  ``"consecutive"`` uses
        ``T_k - T_{k+1}`` and reproduces the utility exactly.  ``"backhaul"``
        uses ``T_k - T_{K+1}``; it agrees only for K = 1 and is kept for
        comparison.
    negative : {"keep", "error", "clamp"}
        Treatment of differences below ``-1e-9``.
    """
    if not 0.0 <= eta <= 1.0:
        raise SpError("eta must lie in [0, 1]")
    if form not in DIFFERENCE_FORMS:
        raise SpError(f"form must be one of {DIFFERENCE_FORMS}")
    if demand.n_cells != table.n_cells:
        raise SpError(f"demand has {demand.n_cells} cells, table has {table.n_cells}")
    if n_cache < 0:
        raise SpError("cache size must be nonnegative")
    T = table.values
    K = table.K
    if form == "consecutive":
        dT = T[:, :K] - T[:, 1:]
    else:
        dT = T[:, :K] - T[:, K:]
    n_clamped = 0
    bad = dT < -NEG_TOL
    if bad.any():
        if negative == "error":
            r, k = np.argwhere(bad)[0]
            raise SpError(f"utility difference {dT[r, k]:.3g} < 0 at region {r}, rank {k + 1}")
        if negative == "clamp":
            n_clamped = int(bad.sum())
            dT = np.where(bad, 0.0, dT)
    dT = np.where(np.abs(dT) <= NEG_TOL, np.maximum(dT, 0.0), dT)
    scale = float(np.abs(T).max()) or 1.0
    sets, where = prefix_sets(table)
    S = np.zeros((len(sets), table.n_cells))
    for s, members in enumerate(sets):
        S[s, list(members)] = 1.0
    # region/rank differences summed into their prefix sets
    R = table.n_regions
    M = np.zeros((R, len(sets)))
    np.add.at(M, (np.repeat(np.arange(R), K), where.ravel()), (dT / scale).ravel())
    Wloc = location_weights(demand, table)  # users x regions
    Wset = Wloc @ M  # users x sets
    coef = demand.Q[:, :, None] * Wset[:, None, :]
    const = Wloc @ (T[:, 0] / scale)
    return SpProblem(sets, S, coef, const, demand.v.copy(), float(eta), float(n_cache), scale, z_min, form, n_clamped)


# ---------------------------------------------------------------------------
# condensed subproblem
# ---------------------------------------------------------------------------


@dataclass
class Subproblem:
    objective: LogSumExpAffine
    constraints: list[LogSumExpAffine]
    lower: np.ndarray
    upper: np.ndarray
    n_z: int
    tau_index: int | None
    sigma_index: int | None
    fair_offset: float
    obj_offset: float
    cache_weights: np.ndarray | None = None
    labels: list[str] = field(default_factory=list)


class _Terms:
    """Rows of exponents and log-coefficients, padded to the full variable vector."""

    def __init__(self, n_var: int):
        self.n_var = n_var
        self.rows: list[sp.csr_matrix] = []
        self.logc: list[np.ndarray] = []

    def add(self, A, coef):
        coef = np.asarray(coef, dtype=float).ravel()
        keep = coef > 0
        if keep.any():
            self.rows.append(sp.csr_matrix(A)[keep])
            self.logc.append(np.log(coef[keep]))
        return self

    def add_var(self, idx: int, coef: float):
        row = sp.csr_matrix(([1.0], ([0], [idx])), shape=(1, self.n_var))
        return self.add(row, [coef])

    def add_const(self, coef: float):
        return self.add(sp.csr_matrix((1, self.n_var)), [coef])

    @property
    def empty(self) -> bool:
        return not self.rows

    def matrix(self):
        return sp.vstack(self.rows).tocsr(), np.concatenate(self.logc)


def _exponents(problem: SpProblem, n_var: int) -> sp.csr_matrix:
    """Exponent rows for every (file, set) product; row ``f * n_sets + s``."""
    nf, nb = problem.n_files, problem.n_bs
    ns = len(problem.sets)
    rows, cols = [], []
    for f in range(nf):
        for s, members in enumerate(problem.sets):
            for b in members:
                rows.append(f * ns + s)
                cols.append(f * nb + b)
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(nf * ns, n_var))


def aux_offsets(problem: SpProblem) -> tuple[float, float]:
    """Offsets keeping ``t + offset`` and ``objective + offset`` strictly positive.

    Every product is at most one because ``z <= 1``, so the negative parts are
    bounded by the sum of their coefficients.
    """
    neg_users = np.clip(-problem.coef, 0, None).sum(axis=(1, 2))
    fair = float(neg_users.max()) + _AUX_MARGIN if neg_users.max() > 0 else 0.0
    neg_net = float(np.clip(-problem.network_coef, 0, None).sum())
    obj = (1.0 - problem.eta) * neg_net
    obj = obj + _AUX_MARGIN if obj > 0 else 0.0
    return fair, obj


def condense_gp(problem: SpProblem, z: np.ndarray, tau: float | None = None, sigma: float | None = None) -> Subproblem:
    """Geometric program approximating the signomial one around ``z``.

    Denominators (the cache budget ``sum_f z_fb`` and the negative parts of
    the objective and fairness constraints) are replaced by monomial lower
    bounds that are tight at the current point, so every feasible point of
    the subproblem is feasible for the original problem.

    Variables are ``y = log z`` (file-major), then ``log(t + offset)`` when
    ``eta > 0``, then ``log(objective + offset)`` when the objective has
    negative terms.
    """
    nf, nb = problem.n_files, problem.n_bs
    eta = problem.eta
    z = np.asarray(z, dtype=float).reshape(nf, nb)
    fair_off, obj_off = aux_offsets(problem)
    use_tau = eta > 0
    use_sigma = obj_off > 0
    n_z = nf * nb
    tau_i = n_z if use_tau else None
    sig_i = n_z + int(use_tau) if use_sigma else None
    n_var = n_z + int(use_tau) + int(use_sigma)

    # condensation point
    g = problem.user_losses(z)
    if tau is None and use_tau:
        tau = float(np.max(g + problem.shift)) + fair_off
    if sigma is None and use_sigma:
        sigma = (1 - eta) * float(problem.v @ g) + (eta * tau if use_tau else 0.0) + obj_off
    x0 = np.zeros(n_var)
    x0[:n_z] = np.log(z).ravel()
    if use_tau:
        x0[tau_i] = np.log(tau)
    if use_sigma:
        x0[sig_i] = np.log(sigma)

    E = _exponents(problem, n_var)
    constraints: list[LogSumExpAffine] = []
    labels: list[str] = []

    # objective
    net = problem.network_coef.ravel()
    num = _Terms(n_var)
    if eta < 1:
        num.add(E, (1 - eta) * np.clip(net, 0, None))
    if use_tau:
        num.add_var(tau_i, eta)
    if use_sigma:
        num.add_const(obj_off)
        den = _Terms(n_var).add_var(sig_i, 1.0).add(E, (1 - eta) * np.clip(-net, 0, None))
        A, c = den.matrix()
        gd, hd = condense(A, c, x0)
        An, cn = num.matrix()
        constraints.append(LogSumExpAffine(An, cn, gd, hd))
        labels.append("objective")
        objective = LogSumExpAffine(*_Terms(n_var).add_var(sig_i, 1.0).matrix())
    else:
        if num.empty:
            num.add_const(1.0)
        objective = LogSumExpAffine(*num.matrix())

    # fairness
    if use_tau:
        for u in range(problem.n_users):
            cu = problem.coef[u].ravel()
            num = _Terms(n_var).add(E, np.clip(cu, 0, None))
            if problem.shift[u] + fair_off > 0:
                num.add_const(problem.shift[u] + fair_off)
            if num.empty:
                continue
            den = _Terms(n_var).add_var(tau_i, 1.0).add(E, np.clip(-cu, 0, None))
            A, c = den.matrix()
            gd, hd = condense(A, c, x0)
            constraints.append(LogSumExpAffine(*num.matrix(), gd, hd))
            labels.append(f"fairness[{u}]")

    # cache budget: sum_f z_fb >= N_f - N_c
    weights = None
    if problem.n_cache < nf:
        weights = z / z.sum(axis=0, keepdims=True)
        for b in range(nb):
            gcol = np.zeros(n_var)
            idx = np.arange(nf) * nb + b
            gcol[idx] = weights[:, b]
            h = float(-np.sum(weights[:, b] * np.log(weights[:, b])))
            one = _Terms(n_var).add_const(nf - problem.n_cache)
            constraints.append(LogSumExpAffine(*one.matrix(), gcol, h))
            labels.append(f"cache[{b}]")

    lower = np.full(n_var, -np.inf)
    upper = np.full(n_var, np.inf)
    lower[:n_z] = np.log(problem.z_min)
    upper[:n_z] = 0.0
    sub = Subproblem(objective, constraints, lower, upper, n_z, tau_i, sig_i, fair_off, obj_off, weights, labels)
    return sub


def starting_point(problem: SpProblem, sub: Subproblem, z: np.ndarray, shrink: float = 1e-3) -> np.ndarray:
    """Strictly feasible start for ``sub`` near ``z``.

    Pulls ``log z`` slightly towards zero (less caching, strictly inside the
    cache budget) and then raises the auxiliary variables until their
    constraints hold with a small margin.
    """
    y = np.log(np.asarray(z, dtype=float)).ravel()
    lo = np.log(problem.z_min)
    y = np.clip((1.0 - shrink) * y, lo * (1 - 1e-12), -1e-12)
    x = np.zeros(len(sub.lower))
    x[: sub.n_z] = y
    for idx, prefix in ((sub.tau_index, "fairness"), (sub.sigma_index, "objective")):
        if idx is None:
            continue
        need = -np.inf
        for cn, lab in zip(sub.constraints, sub.labels):
            if not lab.startswith(prefix):
                continue
            beta = cn.g[idx]
            x[idx] = 0.0
            need = max(need, cn.value(x) / beta)
        x[idx] = need + 1e-3 if np.isfinite(need) else 0.0
    return x
