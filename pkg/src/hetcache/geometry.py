"""Base-station layouts, K-nearest-neighbour sub-regions and frequency plans.

All regions handled here are convex polygons stored as ``(n, 2)`` vertex
arrays in counter-clockwise order.  Cells are the Voronoi cells of the base
stations clipped to the network region, and every cell is partitioned into
sub-regions on which the distance-sorted list of the ``K`` nearest base
stations is constant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SQRT3 = math.sqrt(3.0)

# relative area below which a clipped polygon is treated as empty
_AREA_EPS = 1e-12


class GeometryError(ValueError):
    """Invalid layout or sub-region request."""


# ---------------------------------------------------------------------------
# polygon helpers
# ---------------------------------------------------------------------------


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise vertices)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return np.array([cx, cy])


def clip_halfplane(poly: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    """Clip a convex polygon to ``{x : normal . x <= offset}`` (Sutherland-Hodgman)."""
    if len(poly) == 0:
        return poly
    d = poly @ normal - offset
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        dp, dq = d[i], d[(i + 1) % n]
        if dp <= 0:
            out.append(p)
        if (dp < 0 < dq) or (dq < 0 < dp):
            s = dp / (dp - dq)
            out.append(p + s * (q - p))
    if len(out) < 3:
        return np.empty((0, 2))
    out = np.asarray(out)
    # drop near-duplicate vertices: zero-length edges have no usable direction
    eps = 1e-9 * max(1.0, float(np.abs(out).max()))
    keep = np.linalg.norm(out - np.roll(out, 1, axis=0), axis=1) > eps
    out = out[keep]
    return out if len(out) >= 3 else np.empty((0, 2))


def closer_halfplane(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, float]:
    """Half-plane of points at least as close to ``p`` as to ``q``."""
    normal = 2.0 * (q - p)
    offset = float(q @ q - p @ p)
    return normal, offset


def points_in_convex(poly: np.ndarray, pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Boolean mask of points inside (or on) a counter-clockwise convex polygon."""
    pts = np.atleast_2d(pts)
    inside = np.ones(len(pts), dtype=bool)
    n = len(poly)
    scale = max(1.0, float(np.abs(poly).max()))
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        edge = b - a
        cross = edge[0] * (pts[:, 1] - a[1]) - edge[1] * (pts[:, 0] - a[0])
        inside &= cross >= -tol * scale * np.hypot(*edge)
    return inside


def hexagon(center: Sequence[float], inradius: float) -> np.ndarray:
    """Hexagon with flat sides facing the six lattice neighbours (at k*60 degrees)."""
    R = 2.0 * inradius / SQRT3
    ang = np.deg2rad(30.0 + 60.0 * np.arange(6))
    return np.column_stack([center[0] + R * np.cos(ang), center[1] + R * np.sin(ang)])


def fan_triangles(poly: np.ndarray) -> np.ndarray:
    """Fan triangulation of a convex polygon, shape ``(n-2, 3, 2)``."""
    n = len(poly)
    return np.stack([np.stack([poly[0], poly[i], poly[i + 1]]) for i in range(1, n - 1)])


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkLayout:
    """Fixed base-station positions and their cells.

    ``cells[i]`` is the (convex) cell polygon of BS ``i``.  For the hexagonal
    kind the cells are hexagons of inradius ``cell_radius`` and BS spacing is
    ``2 * cell_radius``; the region is the union of the cells and there is no
    wrap-around.
    """

    kind: str
    bs_coords: np.ndarray
    cell_radius: float
    region: np.ndarray
    cells: tuple[np.ndarray, ...]

    @property
    def n_bs(self) -> int:
        return len(self.bs_coords)

    def cell_area(self, i: int) -> float:
        return polygon_area(self.cells[i])

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "n_bs": self.n_bs, "cell_radius_m": self.cell_radius}
        if self.kind == "explicit":
            d["coords"] = self.bs_coords.tolist()
            d["region"] = self.region.tolist()
        return d


def hex_ring_coords(n_bs: int, spacing: float) -> np.ndarray:
    """Centre BS at the origin followed by rings of a hexagonal lattice."""
    rings = 0
    while 1 + 3 * rings * (rings + 1) < n_bs:
        rings += 1
    if 1 + 3 * rings * (rings + 1) != n_bs:
        raise GeometryError(f"hexagonal layout needs 1, 7, 19, ... BSs, got {n_bs}")
    pts = [(0.0, 0.0)]
    dirs = [np.array([math.cos(math.radians(60 * k)), math.sin(math.radians(60 * k))]) for k in range(6)]
    for r in range(1, rings + 1):
        # walk the ring starting from the corner at angle 0
        for side in range(6):
            start = r * dirs[side]
            step = dirs[(side + 2) % 6]
            for m in range(r):
                p = start + m * step
                pts.append((p[0], p[1]))
    return np.asarray(pts) * spacing


def build_layout(
    kind: str = "hexagonal",
    n_bs: int = 7,
    cell_radius: float = 40.0,
    coords: Sequence[Sequence[float]] | None = None,
    region: Sequence[Sequence[float]] | None = None,
) -> NetworkLayout:
    """Build a hexagonal or explicit (Voronoi) layout.

    Parameters
    ----------
    kind : {"hexagonal", "explicit"}
    n_bs : int
        Number of BSs (hexagonal kind: 1, 7, 19, ...).
    cell_radius : float
        Hexagon inradius ``D`` in meters; for explicit layouts only used to pad
        the default bounding box.
    coords : array-like, optional
        BS coordinates for the explicit kind.
    region : array-like, optional
        Convex region polygon for the explicit kind.  Defaults to the bounding
        box of ``coords`` padded by ``cell_radius``.
    """
    if cell_radius <= 0:
        raise GeometryError("cell radius must be positive")
    if kind == "hexagonal":
        if n_bs < 1:
            raise GeometryError("need at least one BS")
        pts = hex_ring_coords(n_bs, 2.0 * cell_radius)
        cells = tuple(hexagon(p, cell_radius) for p in pts)
        hull = np.vstack(cells)
        return NetworkLayout("hexagonal", pts, float(cell_radius), hull, cells)
    if kind != "explicit":
        raise GeometryError(f"unknown layout kind {kind!r}")
    if coords is None:
        raise GeometryError("explicit layout needs coordinates")
    pts = np.asarray(coords, dtype=float).reshape(-1, 2)
    if len(pts) < 1:
        raise GeometryError("need at least one BS")
    if len(np.unique(np.round(pts, 9), axis=0)) != len(pts):
        raise GeometryError("duplicate BS coordinates")
    if region is None:
        lo = pts.min(axis=0) - cell_radius
        hi = pts.max(axis=0) + cell_radius
        reg = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    else:
        reg = np.asarray(region, dtype=float)
        if polygon_area(reg) < 0:
            reg = reg[::-1]
    cells = []
    for i in range(len(pts)):
        poly = reg
        for b in range(len(pts)):
            if b != i:
                poly = clip_halfplane(poly, *closer_halfplane(pts[i], pts[b]))
        if len(poly) == 0:
            raise GeometryError(f"BS {i} has an empty cell inside the region")
        cells.append(poly)
    return NetworkLayout("explicit", pts, float(cell_radius), reg, tuple(cells))


def layout_from_config(cfg: dict) -> NetworkLayout:
    """Layout from ``{kind, n_bs, cell_radius_m, coords?, region?}``."""
    return build_layout(
        kind=cfg.get("kind", "hexagonal"),
        n_bs=int(cfg.get("n_bs", len(cfg.get("coords", [])) or 7)),
        cell_radius=float(cfg.get("cell_radius_m", 40.0)),
        coords=cfg.get("coords"),
        region=cfg.get("region"),
    )


def load_layout(path: str | Path) -> NetworkLayout:
    return layout_from_config(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# K-NN sub-regions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Subregion:
    cell: int
    index: int
    area: float
    cell_area: float
    order: tuple[int, ...]
    polygon: np.ndarray = field(repr=False)

    @property
    def weight(self) -> float:
        return self.area / self.cell_area


@dataclass(frozen=True)
class SubregionTable:
    layout: NetworkLayout
    K: int
    regions: tuple[Subregion, ...]

    def __post_init__(self):
        lookup = {(r.cell, r.order): n for n, r in enumerate(self.regions)}
        object.__setattr__(self, "_lookup", lookup)

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    def in_cell(self, i: int) -> list[Subregion]:
        return [r for r in self.regions if r.cell == i]

    def n_in_cell(self, i: int) -> int:
        return sum(1 for r in self.regions if r.cell == i)

    @property
    def cell_of(self) -> np.ndarray:
        return np.array([r.cell for r in self.regions], dtype=int)

    @property
    def orders(self) -> np.ndarray:
        return np.array([r.order for r in self.regions], dtype=int).reshape(-1, self.K)

    @property
    def weights(self) -> np.ndarray:
        return np.array([r.weight for r in self.regions])

    def knn(self, pts: np.ndarray) -> np.ndarray:
        """Distance-sorted indices of the K nearest BSs for each point."""
        d = np.linalg.norm(np.atleast_2d(pts)[:, None, :] - self.layout.bs_coords[None], axis=2)
        return np.argsort(d, axis=1, kind="stable")[:, : self.K]

    def locate(self, pts: np.ndarray) -> np.ndarray:
        """Sub-region index of each point (-1 if outside every stored region)."""
        orders = self.knn(pts)
        return np.array([self._lookup.get((int(o[0]), tuple(int(x) for x in o)), -1) for o in orders])


def build_subregions(layout: NetworkLayout, K: int) -> SubregionTable:
    """Partition every cell into regions with a constant K-NN ordering."""
    nb = layout.n_bs
    if not 1 <= K <= nb:
        raise GeometryError(f"K must lie in [1, {nb}], got {K}")
    y = layout.bs_coords
    regions: list[Subregion] = []

    for i in range(nb):
        cell = layout.cells[i]
        cell_area = polygon_area(cell)
        found: list[tuple[tuple[int, ...], np.ndarray]] = []

        def refine(poly: np.ndarray, chosen: list[int]) -> None:
            if len(chosen) == K:
                found.append((tuple(chosen), poly))
                return
            rest = [b for b in range(nb) if b not in chosen]
            for b in rest:
                sub = poly
                for c in rest:
                    if c == b:
                        continue
                    sub = clip_halfplane(sub, *closer_halfplane(y[b], y[c]))
                    if len(sub) == 0:
                        break
                if len(sub) and polygon_area(sub) > _AREA_EPS * cell_area:
                    refine(sub, chosen + [b])

        refine(cell, [i])
        found.sort(key=lambda t: t[0])
        for j, (order, poly) in enumerate(found):
            regions.append(Subregion(i, j, polygon_area(poly), cell_area, order, poly))

    return SubregionTable(layout, K, tuple(regions))


# ---------------------------------------------------------------------------
# frequency plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrequencyPlan:
    colors: np.ndarray
    cochannel: tuple[np.ndarray, ...]
    mode: str

    @property
    def n_colors(self) -> int:
        return int(self.colors.max()) + 1


def conflict_graph(subregions: SubregionTable) -> set[tuple[int, int]]:
    edges = set()
    for r in subregions.regions:
        for a in r.order:
            for b in r.order:
                if a < b:
                    edges.add((a, b))
    return edges


def greedy_coloring(n: int, edges: set[tuple[int, int]]) -> np.ndarray:
    """Colour vertices in index order with the lowest colour unused by neighbours."""
    adj: list[set[int]] = [set() for _ in range(n)]
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    colors = np.full(n, -1, dtype=int)
    for v in range(n):
        used = {colors[w] for w in adj[v] if colors[w] >= 0}
        c = 0
        while c in used:
            c += 1
        colors[v] = c
    return colors


def assign_frequencies(layout: NetworkLayout, subregions: SubregionTable, mode: str = "colored") -> FrequencyPlan:
    """Co-channel sets: greedy colouring of the K-NN conflict graph, or one channel per BS."""
    n = layout.n_bs
    if mode == "orthogonal":
        colors = np.arange(n)
    elif mode == "colored":
        colors = greedy_coloring(n, conflict_graph(subregions))
    else:
        raise GeometryError(f"unknown frequency mode {mode!r}")
    cochannel = tuple(np.flatnonzero(colors == colors[b]) for b in range(n))
    return FrequencyPlan(colors, cochannel, mode)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_in_polygon(poly: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in a convex polygon via area-weighted fan triangles."""
    tris = fan_triangles(poly)
    areas = np.abs([polygon_area(t) for t in tris])
    idx = rng.choice(len(tris), size=n, p=areas / areas.sum())
    u = rng.random((n, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    t = tris[idx]
    return t[:, 0] + u[:, :1] * (t[:, 1] - t[:, 0]) + u[:, 1:] * (t[:, 2] - t[:, 0])


def sample_point_in_cell(layout: NetworkLayout, i: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    if not 0 <= i < layout.n_bs:
        raise GeometryError(f"no cell {i}")
    pts = sample_in_polygon(layout.cells[i], 1 if n is None else n, rng)
    return pts[0] if n is None else pts


def sample_points_in_cells(layout: NetworkLayout, cells: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One uniform point per entry of ``cells``."""
    cells = np.asarray(cells, dtype=int)
    out = np.empty((len(cells), 2))
    for i in np.unique(cells):
        m = cells == i
        out[m] = sample_in_polygon(layout.cells[i], int(m.sum()), rng)
    return out
