"""Per-region link constants: area averages of the point-wise link quantities."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..cubature import integrate_polygon
from ..geometry import FrequencyPlan, NetworkLayout, SubregionTable
from .radio import RadioConfig, backhaul_rate, conditional_rate, success_integrand

METRICS = ("rate", "success")
TABLE_RTOL = 1e-4
_FORMAT_VERSION = 1


class QuadratureError(RuntimeError):
    pass


@dataclass
class UtilityTable:
    """Area-averaged utilities per sub-region.

    ``values[r, k]`` is the utility of delivery by the ``k``-th nearest BS of
    region ``r`` (``k < K``) and ``values[r, K]`` the backhaul fallback.
    ``weight[r]`` is the region's share of its cell area.
    """

    metric: str
    cell: np.ndarray
    order: np.ndarray
    weight: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    n_cells: int
    key: str = ""

    def __post_init__(self):
        self.cell = np.asarray(self.cell, dtype=int)
        self.order = np.atleast_2d(np.asarray(self.order, dtype=int))
        self.weight = np.asarray(self.weight, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.errors = np.atleast_2d(np.asarray(self.errors, dtype=float))
        R, K = self.order.shape
        if self.values.shape != (R, K + 1) or self.errors.shape != (R, K + 1):
            raise ValueError("values/errors must have shape (regions, K+1)")
        if len(self.cell) != R or len(self.weight) != R:
            raise ValueError("cell and weight need one entry per region")
        if np.any(self.order[:, 0] != self.cell):
            raise ValueError("the nearest BS of a region must be its own cell's BS")

    @property
    def K(self) -> int:
        return self.order.shape[1]

    @property
    def n_regions(self) -> int:
        return len(self.cell)

    @classmethod
    def custom(cls, orders, values, weights=None, n_cells=None, metric="rate") -> "UtilityTable":
        """Hand-specified table; ``values`` is one (K+1)-row shared by all regions or one per region."""
        orders = np.atleast_2d(np.asarray(orders, dtype=int))
        R, K = orders.shape
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = np.tile(values, (R, 1))
        cell = orders[:, 0]
        if weights is None:
            counts = np.bincount(cell)
            weights = 1.0 / counts[cell]
        n = int(orders.max()) + 1 if n_cells is None else n_cells
        return cls(metric, cell, orders, weights, values, np.zeros_like(values), n)

    def per_rank(self, areas=None) -> "UtilityTable":
        """Replace every region's row with the area-weighted average over all regions.

        ``areas`` are absolute region areas.  Without them every cell is
        assumed to have the same area, which holds for the hexagonal layout.
        """
        w = self.weight if areas is None else np.asarray(areas, dtype=float)
        w = w / w.sum()
        values = np.tile(w @ self.values, (self.n_regions, 1))
        errors = np.tile(w @ self.errors, (self.n_regions, 1))
        return UtilityTable(self.metric, self.cell, self.order, self.weight, values, errors, self.n_cells, self.key)

    def rank_profile(self) -> np.ndarray:
        """Area-weighted mean utility per rank, backhaul last (equal-area cells)."""
        return (self.weight / self.weight.sum()) @ self.values

    def to_npz(self, path: str | Path) -> None:
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(
                fh,
                metric=self.metric, cell=self.cell, order=self.order, weight=self.weight,
                values=self.values, errors=self.errors, n_cells=self.n_cells, key=self.key,
            )
        os.replace(tmp, path)

    @classmethod
    def from_npz(cls, path: str | Path) -> "UtilityTable":
        with np.load(path) as d:
            return cls(
                str(d["metric"]), d["cell"], d["order"], d["weight"], d["values"], d["errors"],
                int(d["n_cells"]), str(d["key"]),
            )


def table_key(layout: NetworkLayout, subregions: SubregionTable, plan: FrequencyPlan, radio: RadioConfig, metric: str, rtol: float) -> str:
    payload = {
        "version": _FORMAT_VERSION,
        "coords": np.round(layout.bs_coords, 9).tolist(),
        "cells": [np.round(c, 9).tolist() for c in layout.cells],
        "K": subregions.K,
        "colors": plan.colors.tolist(),
        "radio": radio.to_dict(),
        "metric": metric,
        "rtol": rtol,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:24]


def default_cache_dir() -> Path:
    env = os.environ.get("HETCACHE_CACHE_DIR")
    return Path(env) if env else Path.home() / ".cache" / "hetcache"


def _link_values(pts, layout, plan, radio, metric, order, local) -> np.ndarray:
    """Utility of delivery by each BS in ``order`` and by backhaul, per point."""
    y = layout.bs_coords
    K = len(order)
    out = np.zeros((len(pts), K + 1))
    for k, b in enumerate(order):
        if metric == "rate":
            out[:, k] = conditional_rate(pts, y, b, plan.cochannel[b], radio)
        else:
            out[:, k] = success_integrand(pts, y, b, plan.cochannel[b], radio)
    if metric == "rate":
        out[:, K] = backhaul_rate(pts, y, local, plan.cochannel[local], radio)
    return out


def _region_integrand(layout, plan, radio, metric, order, cell):
    return lambda pts: _link_values(pts, layout, plan, radio, metric, order, cell)


def point_utilities(layout: NetworkLayout, plan: FrequencyPlan, radio: RadioConfig, points, K: int, metric: str = "rate"):
    """K nearest BSs and link utilities at fixed user positions.

    Returns ``(orders, values)`` with shapes ``(n, K)`` and ``(n, K + 1)``.
    Distance ties go to the lower BS index; the nearest BS is the local one.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = np.linalg.norm(pts[:, None, :] - layout.bs_coords[None], axis=2)
    orders = np.argsort(d, axis=1, kind="stable")[:, :K]
    values = np.vstack([
        _link_values(p[None], layout, plan, radio, metric, o, o[0]) for p, o in zip(pts, orders)
    ])
    return orders, values


def compute_utility_tables(
    layout: NetworkLayout,
    subregions: SubregionTable,
    plan: FrequencyPlan,
    radio: RadioConfig,
    metric: str = "rate",
    rtol: float = TABLE_RTOL,
    cache_dir: str | Path | None = None,
    use_cache: bool = True,
    strict: bool = True,
    collapse: str = "auto",
) -> UtilityTable:
    """Average every link quantity over every sub-region by adaptive cubature.

    With ``collapse="rank"`` every region gets the network-wide area average
    for each rank, so the table depends on the rank only.  ``"auto"`` does
    this for the hexagonal layout, where regions are treated as symmetric
    copies of each other, and keeps per-region values otherwise
    (``"none"``).  The on-disk cache always holds per-region values.

    For the success metric the fallback entry is 0: a backhaul delivery does
    not count as a successful cached transmission.  Results are cached on
    disk under a hash of all inputs.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    if collapse not in ("auto", "rank", "none"):
        raise ValueError("collapse must be 'auto', 'rank' or 'none'")
    if collapse == "auto":
        collapse = "rank" if layout.kind == "hexagonal" else "none"
    areas = np.array([reg.area for reg in subregions.regions])

    def finish(tab):
        return tab.per_rank(areas) if collapse == "rank" else tab

    key = table_key(layout, subregions, plan, radio, metric, rtol)
    path = None
    if use_cache:
        d = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"table-{key}.npz"
        if path.exists():
            return finish(UtilityTable.from_npz(path))

    R, K = subregions.n_regions, subregions.K
    values = np.zeros((R, K + 1))
    errors = np.zeros((R, K + 1))
    failed = []
    for n, reg in enumerate(subregions.regions):
        fun = _region_integrand(layout, plan, radio, metric, reg.order, reg.cell)
        res = integrate_polygon(fun, reg.polygon, rtol=rtol)
        values[n] = res.value / reg.area
        errors[n] = res.error / reg.area
        if not res.converged:
            failed.append(n)
    if failed and strict:
        raise QuadratureError(f"cubature missed rtol={rtol} on regions {failed}")
    table = UtilityTable(metric, subregions.cell_of, subregions.orders, subregions.weights, values, errors, layout.n_bs, key)
    if path is not None and not failed:
        table.to_npz(path)
    return finish(table)
