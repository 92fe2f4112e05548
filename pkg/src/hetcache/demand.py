"""User request behaviour: popularity, activity, spatial locality and preferences."""

from __future__ import annotations

import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np
from scipy.optimize import minimize_scalar

PMF_TOL = 1e-9
# leftover preference mass below this is treated as zero
_MASS_EPS = 1e-14


class DemandError(ValueError):
    pass


class RequestLogError(DemandError):
    pass


def _check_pmf(x, name: str, tol: float = PMF_TOL) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or len(x) == 0:
        raise DemandError(f"{name} must be a non-empty vector")
    if np.any(x < -tol) or abs(x.sum() - 1.0) > tol:
        raise DemandError(f"{name} is not a probability vector (sum={x.sum():.12g})")
    return np.clip(x, 0.0, None)


@dataclass
class DemandModel:
    """Preferences ``Q`` (users x files), activity ``v``, locations ``A`` (users x cells)."""

    Q: np.ndarray
    v: np.ndarray
    A: np.ndarray
    p: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.v = np.asarray(self.v, dtype=float).ravel()
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if self.p is None:
            self.p = self.v @ self.Q
        self.p = np.asarray(self.p, dtype=float).ravel()

    @property
    def n_users(self) -> int:
        return self.Q.shape[0]

    @property
    def n_files(self) -> int:
        return self.Q.shape[1]

    @property
    def n_cells(self) -> int:
        return self.A.shape[1]

    def validate(self, tol: float = PMF_TOL) -> "DemandModel":
        nu = len(self.v)
        if self.Q.shape[0] != nu or self.A.shape[0] != nu:
            raise DemandError("Q, v and A disagree on the number of users")
        if len(self.p) != self.Q.shape[1]:
            raise DemandError("p and Q disagree on the number of files")
        _check_pmf(self.v, "v", tol)
        _check_pmf(self.p, "p", tol)
        for name, M in (("Q", self.Q), ("A", self.A)):
            if np.any(M < -tol) or np.any(np.abs(M.sum(axis=1) - 1) > tol):
                raise DemandError(f"rows of {name} must be probability vectors")
        gap = np.abs(self.v @ self.Q - self.p).max()
        if gap > tol:
            raise DemandError(f"p differs from the activity-weighted preferences by {gap:.3g}")
        return self

    def with_popularity_preferences(self) -> "DemandModel":
        """Every user gets preference ``p`` and equal activity; locations unchanged."""
        nu = self.n_users
        return DemandModel(np.tile(self.p, (nu, 1)), np.full(nu, 1.0 / nu), self.A.copy(), self.p.copy())

    def to_dict(self) -> dict:
        return {"p": self.p.tolist(), "v": self.v.tolist(), "A": self.A.tolist(), "Q": self.Q.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DemandModel":
        return cls(np.array(d["Q"], float), np.array(d["v"], float), np.array(d["A"], float), np.array(d["p"], float))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "DemandModel":
        return cls.from_dict(json.loads(Path(path).read_text())).validate()


# ---------------------------------------------------------------------------
# Mandelbrot-Zipf
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MZipfParams:
    beta: float
    delta: float
    n: int

    def pmf(self) -> np.ndarray:
        return mzipf_pmf(self.beta, self.delta, self.n)


def mzipf_pmf(beta: float, delta: float, n: int) -> np.ndarray:
    """Rank pmf proportional to ``(f + beta) ** -delta`` for ranks ``f = 1..n``."""
    ranks = np.arange(1, n + 1, dtype=float)
    base = ranks + beta
    if np.any(base <= 0):
        raise DemandError(f"M-Zipf base f + beta must be positive (beta={beta})")
    logw = -delta * np.log(base)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def zipf_pmf(delta: float, n: int) -> np.ndarray:
    return mzipf_pmf(0.0, delta, n)


@dataclass(frozen=True)
class MZipfFit:
    params: MZipfParams
    residual: float
    n_excluded: int


def fit_mzipf(pmf, beta_max: float | None = None, delta_max: float = 20.0) -> MZipfFit:
    """Least-squares fit of an M-Zipf law to a descending pmf in the log domain.

    Zero entries cannot enter a log fit; they are dropped from the residual and
    counted in ``n_excluded``.  The search is nested: for every plateau value
    the skewness is optimised by a bounded 1-D search, and the profile is
    searched over ``log(1 + beta)``.
    """
    pmf = np.asarray(pmf, dtype=float)
    if np.any(np.diff(pmf) > 1e-15):
        raise DemandError("fit_mzipf expects a pmf sorted in descending order")
    n = len(pmf)
    ranks_all = np.arange(1, n + 1, dtype=float)
    keep = pmf > 0
    if keep.sum() < 3:
        raise DemandError("need at least three positive entries to fit")
    ranks = ranks_all[keep]
    # the model is normalised over all n ranks, zeros included
    logp = np.log(pmf[keep])
    if beta_max is None:
        beta_max = 100.0 * n

    def profile(beta: float) -> tuple[float, float]:
        def obj(d):
            logw = -d * np.log(ranks_all + beta)
            m = logw.max()
            logz = m + math.log(np.exp(logw - m).sum())
            return float(np.sum((logw[keep] - logz - logp) ** 2))

        r = minimize_scalar(obj, bounds=(0.0, delta_max), method="bounded", options={"xatol": 1e-10})
        return float(r.fun), float(r.x)

    lo, hi = math.log(1e-9), math.log1p(beta_max)  # beta = exp(s) - 1 > -1
    r = minimize_scalar(lambda s: profile(math.expm1(s))[0], bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    beta = math.expm1(float(r.x))
    res, delta = profile(beta)
    # the zero-plateau (pure Zipf) boundary is a common optimum; check it explicitly
    res0, delta0 = profile(0.0)
    if res0 <= res and abs(beta) < 1e-3:
        beta, res, delta = 0.0, res0, delta0
    return MZipfFit(MZipfParams(beta, delta, n), res, int((~keep).sum()))


# ---------------------------------------------------------------------------
# spatial locality
# ---------------------------------------------------------------------------


def zipf_location_matrix(n_users: int, n_cells: int, delta_a: float, rng: np.random.Generator) -> np.ndarray:
    """Per-user Zipf(delta_a) over a random permutation of the cells."""
    base = zipf_pmf(delta_a, n_cells)
    A = np.empty((n_users, n_cells))
    for u in range(n_users):
        A[u, rng.permutation(n_cells)] = base
    return A


# ---------------------------------------------------------------------------
# preference synthesis
# ---------------------------------------------------------------------------


def synthesize_preferences(p, v, theta: float, rng: np.random.Generator) -> np.ndarray:
    """Random preference matrix whose activity-weighted mean is exactly ``p``.

    ``theta`` in [0, 1] controls how far the rows may deviate from ``p``
    (``theta = 1`` returns ``p`` for every user).  Users are processed in
    random order; each user's files are filled in random order with a uniform
    draw, rescaled towards the residual popularity and capped by what the
    remaining users leave available.
    """
    p = _check_pmf(p, "p")
    v = _check_pmf(v, "v")
    if not 0.0 <= theta <= 1.0:
        raise DemandError("theta must lie in [0, 1]")
    nu, nf = len(v), len(p)
    Q = np.zeros((nu, nf))
    rho = p.copy()
    pcur = p.copy()
    users = list(range(nu))
    while users:
        u = users.pop(int(rng.integers(len(users))))
        vu = v[u]
        q = np.zeros(nf)
        cap = rho / vu if vu > 0 else np.full(nf, np.inf)
        qbar = np.minimum(cap, 1.0)
        l = 1.0
        files = list(range(nf))
        mass_f = float(pcur.sum())
        while l > _MASS_EPS and files:
            f = files.pop(int(rng.integers(len(files))))
            qbar = np.minimum(cap, l)
            lo = theta * pcur[f]
            x = rng.uniform(lo, lo + (1.0 - theta) * qbar[f])
            if mass_f > 0:
                x = min(x * (l / mass_f) ** theta, qbar[f])
            elif theta > 0:
                # no residual popularity left to scale against
                x = qbar[f]
            q[f] = x
            l -= x
            # running sums can dip below zero by rounding
            mass_f = max(mass_f - pcur[f], 0.0)
        if l > _MASS_EPS:
            # Leftover mass goes to files still below their bound.  The last
            # bounds from the fill loop may also be capped by the running
            # remainder; if they cannot absorb the leftover, fall back to the
            # residual bound rho/v alone.  That always suffices: the residual
            # popularity sums to the remaining users' activity, which is at
            # least v_u, so sum_f rho_f / v_u >= 1.
            for bound in (qbar, cap):
                open_ = [f for f in range(nf) if q[f] < bound[f] - _MASS_EPS]
                while l > _MASS_EPS and open_:
                    k = int(rng.integers(len(open_)))
                    f = open_[k]
                    new = min(q[f] + l, bound[f])
                    l -= new - q[f]
                    q[f] = new
                    if q[f] >= bound[f] - _MASS_EPS:
                        open_.pop(k)
                if l <= _MASS_EPS:
                    break
        Q[u] = q / q.sum()
        rho = np.clip(rho - vu * Q[u], 0.0, None)
        if users:
            s = rho.sum()
            pcur = rho / s if s > 0 else np.full(nf, 1.0 / nf)
    return Q


def synthesize_clustered(
    p, v, theta_between: float, theta_within: float, n_clusters: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Two-level synthesis: cluster centres first, then users around their centre.

    Users are split into ``n_clusters`` non-empty groups at random.  A centre's
    activity is the total activity of its members, so the global mixture of
    the final preferences still equals ``p``.
    """
    p = _check_pmf(p, "p")
    v = _check_pmf(v, "v")
    nu = len(v)
    if not 1 <= n_clusters <= nu:
        raise DemandError(f"number of clusters must lie in [1, {nu}]")
    if n_clusters == 1:
        return synthesize_preferences(p, v, theta_within, rng), np.zeros(nu, dtype=int)
    assign = np.empty(nu, dtype=int)
    assign[rng.permutation(nu)] = np.arange(nu) % n_clusters
    weight = np.bincount(assign, weights=v, minlength=n_clusters)
    active = weight > 0
    centers = np.zeros((n_clusters, len(p)))
    centers[active] = synthesize_preferences(p, weight[active] / weight[active].sum(), theta_between, rng)
    Q = np.zeros((nu, len(p)))
    for m in range(n_clusters):
        members = np.flatnonzero(assign == m)
        if weight[m] > 0:
            Q[members] = synthesize_preferences(centers[m], v[members] / weight[m], theta_within, rng)
        else:
            Q[members] = centers[m] if centers[m].sum() > 0 else p
    return Q, assign


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def cosine_similarity_matrix(Q) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    norms = np.linalg.norm(Q, axis=1)
    if np.any(norms == 0):
        raise DemandError("cosine similarity is undefined for an all-zero preference row")
    U = Q / norms[:, None]
    return U @ U.T


def cosine(a, b) -> float:
    return float(cosine_similarity_matrix(np.vstack([a, b]))[0, 1])


def average_similarity(Q) -> float:
    """Mean cosine similarity over all unordered user pairs."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = len(Q)
    if n < 2:
        raise DemandError("average similarity needs at least two users")
    C = cosine_similarity_matrix(Q)
    iu = np.triu_indices(n, 1)
    return float(C[iu].mean())


def mean_similarity(p, v, theta: float, seeds: Iterable[int]) -> float:
    return float(np.mean([average_similarity(synthesize_preferences(p, v, theta, np.random.default_rng(s))) for s in seeds]))


def calibrate_theta(p, v, target: float, n_seeds: int = 10, seed: int = 0, tol: float = 0.02, max_iter: int = 40) -> float:
    """Bisection on theta so that the seed-averaged similarity hits ``target``."""
    seeds = [seed + k for k in range(n_seeds)]
    hi_sim = 1.0
    if target >= hi_sim - 1e-12:
        return 1.0
    lo_sim = mean_similarity(p, v, 0.0, seeds)
    if abs(lo_sim - target) <= tol:
        return 0.0
    if target < lo_sim or target > hi_sim:
        raise DemandError(f"similarity {target} is outside the reachable range [{lo_sim:.3f}, 1]")
    lo, hi = 0.0, 1.0
    theta = 0.5
    for _ in range(max_iter):
        theta = 0.5 * (lo + hi)
        s = mean_similarity(p, v, theta, seeds)
        if abs(s - target) <= tol / 2 or hi - lo < 1e-4:
            break
        if s < target:
            lo = theta
        else:
            hi = theta
    return theta


# ---------------------------------------------------------------------------
# local popularity
# ---------------------------------------------------------------------------


def local_popularity(demand: DemandModel) -> np.ndarray:
    """File popularity within every cell, shape ``(n_files, n_cells)``.

    Columns of cells that receive no requests are NaN.
    """
    W = demand.A * demand.v[:, None]  # users x cells
    num = demand.Q.T @ W
    den = W.sum(axis=0)
    out = np.full_like(num, np.nan)
    ok = den > 0
    out[:, ok] = num[:, ok] / den[ok]
    return out


# ---------------------------------------------------------------------------
# synthetic demand
# ---------------------------------------------------------------------------


def synthesize_demand(
    n_users: int,
    n_files: int,
    n_cells: int,
    rng: np.random.Generator,
    delta_p: float = 0.6,
    delta_v: float = 0.4,
    delta_a: float = 1.0,
    theta: float = 1.0,
    beta_p: float = 0.0,
    beta_v: float = 0.0,
) -> DemandModel:
    p = mzipf_pmf(beta_p, delta_p, n_files)
    v = mzipf_pmf(beta_v, delta_v, n_users)
    # draw A before Q so that changing theta leaves the locations untouched
    A = zipf_location_matrix(n_users, n_cells, delta_a, rng)
    Q = synthesize_preferences(p, v, theta, rng)
    return DemandModel(Q, v, A, p)


# ---------------------------------------------------------------------------
# request logs
# ---------------------------------------------------------------------------


@dataclass
class RequestLog:
    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.counts)


def parse_request_log(stream: TextIO | str) -> RequestLog:
    """Read ``user<TAB>item<TAB>count`` lines; blank lines and ``#`` comments are skipped."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    log = RequestLog()
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise RequestLogError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        user, item, count = parts
        try:
            c = int(count)
        except ValueError:
            raise RequestLogError(f"line {lineno}: count {count!r} is not an integer") from None
        if c <= 0:
            raise RequestLogError(f"line {lineno}: count must be positive")
        log.users.append(user)
        log.items.append(item)
        log.counts.append(c)
    if not log.counts:
        raise RequestLogError("empty request log")
    return log


@dataclass
class EmpiricalDemand:
    p: np.ndarray
    v: np.ndarray
    Q: np.ndarray
    user_ids: list[str]
    item_ids: list[str]
    dropped_users: list[str]

    def model(self, A: np.ndarray | None = None, n_cells: int = 1) -> DemandModel:
        if A is None:
            A = np.full((len(self.v), n_cells), 1.0 / n_cells)
        return DemandModel(self.Q, self.v, A, self.p)


def empirical_demand(log: RequestLog, top_users: int = 100, top_items: int = 500) -> EmpiricalDemand:
    """Frequencies over the most active users and their most requested items."""
    if len(log) == 0:
        raise RequestLogError("empty request log")
    per_user: dict[str, int] = defaultdict(int)
    for u, c in zip(log.users, log.counts):
        per_user[u] += c
    first_seen = {u: k for k, u in reversed(list(enumerate(log.users)))}
    users = sorted(per_user, key=lambda u: (-per_user[u], first_seen[u]))[:top_users]
    uidx = {u: k for k, u in enumerate(users)}
    per_item: dict[str, int] = defaultdict(int)
    for u, it, c in zip(log.users, log.items, log.counts):
        if u in uidx:
            per_item[it] += c
    item_first = {it: k for k, it in reversed(list(enumerate(log.items)))}
    items = sorted(per_item, key=lambda it: (-per_item[it], item_first[it]))[:top_items]
    iidx = {it: k for k, it in enumerate(items)}
    M = np.zeros((len(users), len(items)))
    for u, it, c in zip(log.users, log.items, log.counts):
        if u in uidx and it in iidx:
            M[uidx[u], iidx[it]] += c
    keep = M.sum(axis=1) > 0
    dropped = [u for u, k in zip(users, keep) if not k]
    M = M[keep]
    users = [u for u, k in zip(users, keep) if k]
    total = M.sum()
    v = M.sum(axis=1) / total
    p = M.sum(axis=0) / total
    Q = M / M.sum(axis=1, keepdims=True)
    return EmpiricalDemand(p, v, Q, users, items, dropped)
