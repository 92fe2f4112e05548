"""Monte Carlo reference: random caches, requests, positions and fading.

Requests are processed in epochs.  At the start of every epoch each BS draws
a cache content with the prescribed marginals; then every request picks a
user, a file, a cell and a uniform position in that cell.  The user is served
by the nearest of its K nearest BSs that holds the file, otherwise by its
local BS over the backhaul.  Every co-channel BS transmits all the time and
every link sees independent unit-mean exponential fading.

Every chunk of requests has its own counter-based random stream derived from
``(seed, first request index)``, so results do not depend on how chunks are spread over
worker processes.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .demand import DemandModel
from .geometry import FrequencyPlan, NetworkLayout, sample_points_in_cells
from .utility import RadioConfig

DEFAULT_EPOCHS = 100


class SimulationError(ValueError):
    pass


def stream_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def realize_cache(column, n_cache: float, rng: np.random.Generator) -> np.ndarray:
    """Files cached at one BS, drawn so that file f is present with probability ``column[f]``.

    Segments of length ``c_f`` are laid end to end over ``ceil(N_c)`` unit
    slots and one uniform offset picks a point in every slot.  A segment is
    at most one unit long, so no file is picked twice, and exactly ``N_c``
    files are picked when the column sums to ``N_c``.
    """
    c = np.asarray(column, dtype=float)
    if np.any(c < -1e-12) or np.any(c > 1 + 1e-12):
        raise SimulationError("caching probabilities must lie in [0, 1]")
    if c.sum() > n_cache + 1e-6:
        raise SimulationError(f"column sums to {c.sum():.6g} > cache size {n_cache}")
    c = np.clip(c, 0.0, 1.0)
    ends = np.cumsum(c)
    n_slots = int(np.ceil(n_cache - 1e-9))
    w = rng.random()
    marks = np.arange(n_slots) + w
    marks = marks[marks < ends[-1]] if len(ends) else marks[:0]
    picked = np.searchsorted(ends, marks, side="right")
    return np.unique(picked)


def realize_caches(policy: np.ndarray, n_cache: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``(n_files, n_bs)`` cache contents for every BS."""
    c = np.atleast_2d(np.asarray(policy, dtype=float))
    out = np.zeros(c.shape, dtype=bool)
    for b in range(c.shape[1]):
        out[realize_cache(c[:, b], n_cache, rng), b] = True
    return out


def _categorical(probs: np.ndarray, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per entry of ``rows`` from the distribution ``probs[row]``."""
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    r = rng.random(len(rows))
    return (cdf[rows] <= r[:, None]).sum(axis=1)


@dataclass
class Requests:
    user: np.ndarray
    file: np.ndarray
    cell: np.ndarray
    points: np.ndarray


def sample_requests(demand: DemandModel, layout: NetworkLayout, n: int, rng: np.random.Generator) -> Requests:
    """Users by activity, files by preference, cells by location, uniform positions."""
    u = rng.choice(demand.n_users, size=n, p=demand.v)
    f = _categorical(demand.Q, u, rng)
    i = _categorical(demand.A, u, rng)
    pts = sample_points_in_cells(layout, i, rng)
    return Requests(u, f, i, pts)


def sample_request(demand: DemandModel, layout: NetworkLayout, rng: np.random.Generator) -> tuple[int, int, int, np.ndarray]:
    r = sample_requests(demand, layout, 1, rng)
    return int(r.user[0]), int(r.file[0]), int(r.cell[0]), r.points[0]


@dataclass
class Outcomes:
    """Per-request results of one batch (all arrays have one entry per request)."""

    requests: Requests
    knn: np.ndarray  # (n, K)
    server: np.ndarray  # serving BS, the local BS for backhaul deliveries
    backhaul: np.ndarray  # bool
    sinr: np.ndarray
    success: np.ndarray  # bool: cache delivery with SINR above threshold
    rate: np.ndarray
    caches: np.ndarray | None = None


def _sinr(points, server, layout: NetworkLayout, plan: FrequencyPlan, radio: RadioConfig, rng) -> np.ndarray:
    """SINR of each request's link to ``server`` with fresh fading on every co-channel BS."""
    n = len(server)
    d = np.linalg.norm(points[:, None, :] - layout.bs_coords[None], axis=2)
    gain = rng.exponential(size=d.shape) * d ** (-radio.pathloss_exp)
    co = np.zeros((layout.n_bs, layout.n_bs), dtype=bool)
    for b in range(layout.n_bs):
        co[b, list(np.atleast_1d(plan.cochannel[b]))] = True
    same = co[server]
    rows = np.arange(n)
    signal = gain[rows, server]
    interference = np.where(same, gain, 0.0).sum(axis=1) - signal
    return signal / (interference + radio.noise_ratio)


def serve(requests: Requests, caches: np.ndarray, layout: NetworkLayout, plan: FrequencyPlan, radio: RadioConfig, K: int, rng) -> Outcomes:
    """Association, fading and delivered utility for a batch of requests."""
    pts = requests.points
    d = np.linalg.norm(pts[:, None, :] - layout.bs_coords[None], axis=2)
    knn = np.argsort(d, axis=1, kind="stable")[:, :K]
    has = caches[requests.file[:, None], knn]  # n, K
    return _deliver(requests, knn, has, layout, plan, radio, rng)


@dataclass
class UserStats:
    """Sufficient statistics per user; adding two of them merges runs."""

    n: np.ndarray
    success: np.ndarray
    rate_sum: np.ndarray
    rate_sq: np.ndarray

    @classmethod
    def zeros(cls, n_users: int) -> "UserStats":
        z = np.zeros(n_users)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())

    @classmethod
    def from_outcomes(cls, out: Outcomes, n_users: int) -> "UserStats":
        u = out.requests.user
        return cls(
            np.bincount(u, minlength=n_users).astype(float),
            np.bincount(u, weights=out.success.astype(float), minlength=n_users),
            np.bincount(u, weights=out.rate, minlength=n_users),
            np.bincount(u, weights=out.rate**2, minlength=n_users),
        )

    def __add__(self, other: "UserStats") -> "UserStats":
        return UserStats(self.n + other.n, self.success + other.success, self.rate_sum + other.rate_sum, self.rate_sq + other.rate_sq)


@dataclass
class SimulationResult:
    stats: UserStats
    n_requests: int
    epochs: int
    seed: int

    @property
    def defined(self) -> np.ndarray:
        return self.stats.n > 0

    def _per_user(self, num):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.defined, num / np.maximum(self.stats.n, 1), np.nan)

    @property
    def success(self) -> np.ndarray:
        return self._per_user(self.stats.success)

    @property
    def success_se(self) -> np.ndarray:
        s = self.success
        return np.sqrt(s * (1 - s) / np.maximum(self.stats.n, 1))

    @property
    def rate(self) -> np.ndarray:
        return self._per_user(self.stats.rate_sum)

    @property
    def rate_se(self) -> np.ndarray:
        m = self.rate
        var = self._per_user(self.stats.rate_sq) - m**2
        n = np.maximum(self.stats.n, 2)
        return np.sqrt(np.clip(var, 0, None) * n / (n - 1) / n)

    @property
    def network_success(self) -> float:
        return float(self.stats.success.sum() / self.stats.n.sum())

    @property
    def network_rate(self) -> float:
        return float(self.stats.rate_sum.sum() / self.stats.n.sum())

    def rows(self) -> list[dict]:
        return [
            {"user": u, "requests": int(self.stats.n[u]), "success": self.success[u], "success_se": self.success_se[u],
             "rate": self.rate[u], "rate_se": self.rate_se[u]}
            for u in range(len(self.stats.n))
        ]


def cache_offsets(seed: int, epochs: int, n_bs: int) -> np.ndarray:
    """Block-stacking offset of every BS in every epoch, shape ``(epochs, n_bs)``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x5EED])))
    return rng.random((epochs, n_bs))


def _chunk_stats(args) -> UserStats:
    c, demand, layout, plan, radio, K, seed, start, m, n_requests, offsets = args
    rng = stream_rng(seed, start)
    req = sample_requests(demand, layout, m, rng)
    pts = req.points
    d = np.linalg.norm(pts[:, None, :] - layout.bs_coords[None], axis=2)
    knn = np.argsort(d, axis=1, kind="stable")[:, :K]
    epochs = len(offsets)
    epoch = (np.arange(start, start + m) * epochs) // n_requests
    ends = np.cumsum(c, axis=0)  # f, b
    hi = ends[req.file[:, None], knn]
    lo = hi - c[req.file[:, None], knn]
    w = offsets[epoch[:, None], knn]
    has = (np.ceil(hi - w) - np.ceil(lo - w)) >= 1
    out = _deliver(req, knn, has, layout, plan, radio, rng)
    return UserStats.from_outcomes(out, demand.n_users)


def _deliver(req: Requests, knn, has, layout, plan, radio, rng) -> Outcomes:
    hit = has.any(axis=1)
    first = np.argmax(has, axis=1)
    server = np.where(hit, knn[np.arange(len(knn)), first], knn[:, 0])
    sinr = _sinr(req.points, server, layout, plan, radio, rng)
    link = radio.bandwidth_hz * np.log2(1.0 + sinr)
    rate = np.where(hit, link, np.minimum(link, radio.backhaul_bps))
    success = hit & (sinr > radio.gamma0)
    return Outcomes(req, knn, server, ~hit, sinr, success, rate)


def simulate(
    policy,
    n_cache: float,
    demand: DemandModel,
    layout: NetworkLayout,
    plan: FrequencyPlan,
    radio: RadioConfig,
    K: int,
    n_requests: int,
    seed: int = 0,
    epochs: int = DEFAULT_EPOCHS,
    workers: int = 1,
    chunk: int = 50_000,
) -> SimulationResult:
    """Empirical per-user success probability and mean delivered rate.

    Requests are split into ``epochs`` consecutive groups that share one
    cache realisation.  The reported standard errors treat requests as
    independent, so they only describe the fading and location noise when
    there are few epochs; ``epochs=n_requests`` redraws the caches for every
    request.

    Random streams are keyed by ``(seed, first request of the chunk)`` and
    caches by ``seed`` alone, so ``workers > 1`` gives bit-identical results
    for the same ``chunk``.
    """
    if n_requests < 1:
        raise SimulationError("need at least one request")
    if epochs < 1:
        raise SimulationError("need at least one epoch")
    c = np.atleast_2d(np.asarray(policy, dtype=float))
    if c.shape != (demand.n_files, layout.n_bs):
        raise SimulationError(f"policy shape {c.shape} does not match ({demand.n_files}, {layout.n_bs})")
    if np.any(c < -1e-12) or np.any(c > 1 + 1e-12):
        raise SimulationError("caching probabilities must lie in [0, 1]")
    if np.any(c.sum(axis=0) > n_cache + 1e-6):
        raise SimulationError("policy exceeds the cache size")
    c = np.clip(c, 0.0, 1.0)
    epochs = min(epochs, n_requests)
    offsets = cache_offsets(seed, epochs, layout.n_bs)
    starts = range(0, n_requests, chunk)
    jobs = [(c, demand, layout, plan, radio, K, seed, s0, min(chunk, n_requests - s0), n_requests, offsets) for s0 in starts]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_stats, jobs))
    else:
        parts = [_chunk_stats(j) for j in jobs]
    total = UserStats.zeros(demand.n_users)
    for p in parts:
        total = total + p
    return SimulationResult(total, n_requests, epochs, seed)


def trace_requests(policy, n_cache, demand, layout, plan, radio, K, n_requests, seed=0) -> Outcomes:
    """Full per-request record of a single-epoch run (for inspection and tests)."""
    rng = stream_rng(seed, 0)
    caches = realize_caches(policy, n_cache, rng)
    req = sample_requests(demand, layout, n_requests, rng)
    out = serve(req, caches, layout, plan, radio, K, rng)
    out.caches = caches
    return out
