"""Reference caching policies to compare against the optimised ones."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..demand import DemandModel, local_popularity
from ..geometry import FrequencyPlan, NetworkLayout, sample_points_in_cells
from ..utility import RadioConfig, UtilityTable, point_utilities
from .solve import CachingPolicy, SolveResult, solve_p0

PREFERENCE_MODES = ("popularity", "preference")


class BaselineError(ValueError):
    pass


def _slots(n_cache: float, n_files: int) -> int:
    if n_cache < 0 or abs(n_cache - round(n_cache)) > 1e-9:
        raise BaselineError("deterministic placements need a nonnegative integer cache size")
    return min(int(round(n_cache)), n_files)


def _top(scores: np.ndarray, n: int) -> np.ndarray:
    # stable sort keeps the lower file index first among ties
    return np.argsort(-scores, kind="stable")[:n]


def policy_local_pop(demand: DemandModel, n_cache: float) -> CachingPolicy:
    """Every BS caches the ``N_c`` files most popular in its own cell."""
    pop = local_popularity(demand)
    bad = np.flatnonzero(np.isnan(pop).any(axis=0))
    if bad.size:
        raise BaselineError(f"local popularity undefined in cells {bad.tolist()} (no requests)")
    n = _slots(n_cache, demand.n_files)
    c = np.zeros((demand.n_files, demand.n_cells))
    for b in range(demand.n_cells):
        c[_top(pop[:, b], n), b] = 1.0
    return CachingPolicy(c, n_cache)


@dataclass
class UserPositions:
    """One fixed location per user: its cell and coordinates."""

    cells: np.ndarray
    points: np.ndarray


def sample_user_positions(demand: DemandModel, layout: NetworkLayout, rng: np.random.Generator) -> UserPositions:
    """Draw each user's cell from its location distribution, then a uniform point in it."""
    cells = np.array([rng.choice(demand.n_cells, p=a) for a in demand.A])
    return UserPositions(cells, sample_points_in_cells(layout, cells, rng))


def greedy_placement(orders: np.ndarray, values: np.ndarray, weights: np.ndarray, n_cells: int, n_cache: float) -> np.ndarray:
    """Greedy deterministic placement for users at known positions.

    Parameters
    ----------
    orders : (n_users, K) int
        Nearest BSs of every user, nearest first.
    values : (n_users, K + 1)
        Utility of delivery from each of them, backhaul last.
    weights : (n_users, n_files)
        Request weight of every (user, file) pair.
    n_cells, n_cache
        Number of BSs and files per BS.

    Adds the (file, BS) pair with the largest gain in weighted utility until
    every BS holds exactly ``N_c`` files.  A user is served by its nearest BS
    holding the file.
    """
    nu, nf = weights.shape
    K = orders.shape[1]
    n = _slots(n_cache, nf)
    rank = np.full((nu, n_cells), K)
    for u in range(nu):
        rank[u, orders[u]] = np.arange(K)
    link = np.take_along_axis(values, rank, axis=1)  # u, b; BSs outside the K-NN set get the backhaul value
    served = np.full((nu, nf), K)  # current serving rank, K = backhaul
    placed = np.zeros((nf, n_cells), dtype=bool)
    load = np.zeros(n_cells, dtype=int)
    for _ in range(n * n_cells):
        cur = np.take_along_axis(values, served, axis=1)  # u, f
        nearer = rank[:, None, :] < served[:, :, None]  # u, f, b
        delta = np.where(nearer, link[:, None, :] - cur[:, :, None], 0.0)
        gain = np.einsum("uf,ufb->fb", weights, delta)
        gain[placed] = -np.inf
        gain[:, load >= n] = -np.inf
        f, b = np.unravel_index(int(np.argmax(gain)), gain.shape)
        placed[f, b] = True
        load[b] += 1
        served[:, f] = np.minimum(served[:, f], rank[:, b])
    return placed.astype(float)


def policy_femtocaching(
    demand: DemandModel,
    layout: NetworkLayout,
    plan: FrequencyPlan,
    radio: RadioConfig,
    K: int,
    n_cache: float,
    positions: UserPositions | None = None,
    rng: np.random.Generator | None = None,
    mode: str = "popularity",
    metric: str = "rate",
) -> CachingPolicy:
    """Deterministic placement optimised for one realisation of user positions.

    ``mode="popularity"`` weights every user equally with the global
    popularity; ``mode="preference"`` uses each user's own preference and
    activity level.
    """
    if mode not in PREFERENCE_MODES:
        raise BaselineError(f"mode must be one of {PREFERENCE_MODES}")
    if positions is None:
        if rng is None:
            raise BaselineError("need either positions or a random generator")
        positions = sample_user_positions(demand, layout, rng)
    orders, values = point_utilities(layout, plan, radio, positions.points, K, metric)
    if mode == "popularity":
        weights = np.tile(demand.p, (demand.n_users, 1)) / demand.n_users
    else:
        weights = demand.v[:, None] * demand.Q
    c = greedy_placement(orders, values, weights, layout.n_bs, n_cache)
    return CachingPolicy(c, n_cache)


def policy_pop(demand: DemandModel, table: UtilityTable, n_cache: float, eta: float, **solver_kw) -> SolveResult:
    """Optimised policy computed as if every user had the global popularity and equal activity."""
    return solve_p0(demand.with_popularity_preferences(), table, n_cache, eta, **solver_kw)
