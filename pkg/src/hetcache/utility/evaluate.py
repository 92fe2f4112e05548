"""Expected user and network utilities of a probabilistic caching policy."""

from __future__ import annotations

import numpy as np

from ..demand import DemandModel
from .tables import UtilityTable

_TOL = 1e-9


def _check(policy, table: UtilityTable, demand: DemandModel | None = None) -> np.ndarray:
    c = np.atleast_2d(np.asarray(policy, dtype=float))
    if c.shape[1] != table.n_cells:
        raise ValueError(f"policy has {c.shape[1]} BS columns, table has {table.n_cells}")
    if demand is not None:
        if c.shape[0] != demand.n_files:
            raise ValueError(f"policy has {c.shape[0]} files, demand has {demand.n_files}")
        if demand.n_cells != table.n_cells:
            raise ValueError(f"demand has {demand.n_cells} cells, table has {table.n_cells}")
    if np.any(c < -_TOL) or np.any(c > 1 + _TOL):
        raise ValueError("policy entries must lie in [0, 1]")
    return np.clip(c, 0.0, 1.0)


def delivery_probabilities(policy, table: UtilityTable) -> np.ndarray:
    """P(file f is delivered by rank k in region r); last slot is the backhaul.

    Shape ``(n_files, n_regions, K + 1)``; sums to one over the last axis.
    """
    c = _check(policy, table)
    hit = c[:, table.order]  # f, r, k
    miss = np.cumprod(1.0 - hit, axis=2)
    before = np.concatenate([np.ones(hit.shape[:2] + (1,)), miss[..., :-1]], axis=2)
    return np.concatenate([hit * before, miss[..., -1:]], axis=2)


def region_file_utilities(policy, table: UtilityTable) -> np.ndarray:
    """Expected utility per (file, region), shape ``(n_files, n_regions)``."""
    return np.einsum("frk,rk->fr", delivery_probabilities(policy, table), table.values)


def location_weights(demand: DemandModel, table: UtilityTable) -> np.ndarray:
    """``a_{u,cell(r)} * |D_r| / |D_cell|``, shape ``(n_users, n_regions)``."""
    return demand.A[:, table.cell] * table.weight[None, :]


def user_file_utilities(policy, demand: DemandModel, table: UtilityTable) -> np.ndarray:
    """Utility of user u downloading file f, shape ``(n_users, n_files)``."""
    _check(policy, table, demand)
    return location_weights(demand, table) @ region_file_utilities(policy, table).T


def user_utilities(policy, demand: DemandModel, table: UtilityTable) -> np.ndarray:
    return np.sum(demand.Q * user_file_utilities(policy, demand, table), axis=1)


def user_utility(policy, demand: DemandModel, table: UtilityTable, u: int) -> float:
    return float(user_utilities(policy, demand, table)[u])


def network_utility(policy, demand: DemandModel, table: UtilityTable) -> float:
    return float(demand.v @ user_utilities(policy, demand, table))


def min_utility(policy, demand: DemandModel, table: UtilityTable) -> tuple[float, int]:
    """Smallest user utility and the lowest index attaining it."""
    tu = user_utilities(policy, demand, table)
    u = int(np.argmin(tu))
    return float(tu[u]), u


def local_hit_utilities(demand: DemandModel, table: UtilityTable) -> np.ndarray:
    """User utilities when every file is always at the local BS."""
    return location_weights(demand, table) @ table.values[:, 0]
