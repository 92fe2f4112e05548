import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetcache.demand import synthesize_demand
from hetcache.geometry import assign_frequencies, build_layout, build_subregions
from hetcache.simulator import (
    SimulationError,
    realize_cache,
    realize_caches,
    sample_requests,
    simulate,
    stream_rng,
    trace_requests,
)
from hetcache.utility import RadioConfig, compute_utility_tables, user_utilities

RADIO = RadioConfig()


@pytest.fixture(scope="module")
def net(tmp_path_factory):
    lay = build_layout("hexagonal", 7, 40.0)
    sub = build_subregions(lay, 3)
    plan = assign_frequencies(lay, sub)
    cache = tmp_path_factory.mktemp("tables")
    rate = compute_utility_tables(lay, sub, plan, RADIO, "rate", cache_dir=cache, collapse="none")
    succ = compute_utility_tables(lay, sub, plan, RADIO, "success", cache_dir=cache, collapse="none")
    return lay, plan, rate, succ


def _budget_policy(rng, nf, nb, n_cache):
    c = rng.dirichlet(np.ones(nf), size=nb).T * n_cache
    while np.any(c > 1):
        over = np.clip(c - 1, 0, None)
        c = np.minimum(c, 1)
        c += over.sum(axis=0) * (c < 1) / np.maximum((c < 1).sum(axis=0), 1)
    return c


# --- cache realisation -------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), nf=st.integers(2, 8), n_cache=st.integers(1, 3))
def test_cache_size_exact(seed, nf, n_cache):
    rng = np.random.default_rng(seed)
    n_cache = min(n_cache, nf)
    col = _budget_policy(rng, nf, 1, n_cache)[:, 0]
    files = realize_cache(col, n_cache, rng)
    assert len(files) == n_cache
    assert len(set(files.tolist())) == len(files)


def test_cache_marginals():
    rng = np.random.default_rng(0)
    col = np.array([0.9, 0.5, 0.35, 0.15, 0.1])
    n = 40_000
    counts = np.zeros(5)
    for _ in range(n):
        counts[realize_cache(col, 2, rng)] += 1
    se = np.sqrt(col * (1 - col) / n)
    assert np.all(np.abs(counts / n - col) <= 4 * se)


def test_cache_deterministic_policy():
    rng = np.random.default_rng(1)
    assert realize_cache([0, 1, 0, 1], 2, rng).tolist() == [1, 3]
    assert realize_cache([0, 0, 0], 1, rng).tolist() == []


def test_cache_budget_violation():
    with pytest.raises(SimulationError):
        realize_cache([0.8, 0.8], 1, np.random.default_rng(0))
    with pytest.raises(SimulationError):
        realize_cache([1.2, 0.0], 2, np.random.default_rng(0))


# --- request sampling ------------------------------------------------------------------


def test_request_marginals(net):
    lay, *_ = net
    rng = np.random.default_rng(3)
    d = synthesize_demand(4, 6, 7, rng, theta=0.3, delta_a=1.0)
    n = 200_000
    req = sample_requests(d, lay, n, stream_rng(0, 0))
    freq_u = np.bincount(req.user, minlength=4) / n
    assert np.all(np.abs(freq_u - d.v) <= 4 * np.sqrt(d.v * (1 - d.v) / n))
    u0 = req.user == 0
    n0 = u0.sum()
    ff = np.bincount(req.file[u0], minlength=6) / n0
    assert np.all(np.abs(ff - d.Q[0]) <= 4 * np.sqrt(d.Q[0] * (1 - d.Q[0]) / n0) + 1e-12)
    fc = np.bincount(req.cell[u0], minlength=7) / n0
    assert np.all(np.abs(fc - d.A[0]) <= 4 * np.sqrt(d.A[0] * (1 - d.A[0]) / n0) + 1e-12)
    # every point lies in the cell it was drawn for: its nearest BS is that cell's BS
    nearest = np.argmin(np.linalg.norm(req.points[:, None] - lay.bs_coords[None], axis=2), axis=1)
    assert np.mean(nearest == req.cell) > 0.9999


# --- association and delivery -------------------------------------------------------------


def test_association_rules(net):
    lay, plan, *_ = net
    rng = np.random.default_rng(4)
    d = synthesize_demand(3, 5, 7, rng, theta=0.3)
    c = _budget_policy(rng, 5, 7, 2)
    out = trace_requests(c, 2, d, lay, plan, RADIO, 3, 5000, seed=1)
    has = out.caches[out.requests.file[:, None], out.knn]
    hit = has.any(axis=1)
    assert np.array_equal(out.backhaul, ~hit)
    first = out.knn[np.arange(len(hit)), np.argmax(has, axis=1)]
    assert np.array_equal(out.server[hit], first[hit])
    assert np.array_equal(out.server[~hit], out.knn[~hit, 0])
    assert np.all(out.rate[~hit] <= RADIO.backhaul_bps)
    assert not out.success[~hit].any()


def test_empty_and_full_caches(net):
    lay, plan, rate, succ = net
    rng = np.random.default_rng(5)
    d = synthesize_demand(3, 4, 7, rng, theta=0.3)
    empty = simulate(np.zeros((4, 7)), 1, d, lay, plan, RADIO, 3, 20_000, seed=0)
    assert empty.network_success == 0.0
    assert empty.network_rate <= RADIO.backhaul_bps
    full = simulate(np.ones((4, 7)), 4, d, lay, plan, RADIO, 3, 40_000, seed=0)
    expected = user_utilities(np.ones((4, 7)), d, rate)
    assert np.all(np.abs(full.rate - expected) <= 4 * full.rate_se)


def test_serial_equals_parallel(net):
    lay, plan, *_ = net
    rng = np.random.default_rng(6)
    d = synthesize_demand(3, 5, 7, rng, theta=0.3)
    c = _budget_policy(rng, 5, 7, 2)
    a = simulate(c, 2, d, lay, plan, RADIO, 3, 30_000, seed=9, chunk=10_000, workers=1)
    b = simulate(c, 2, d, lay, plan, RADIO, 3, 30_000, seed=9, chunk=10_000, workers=2)
    assert np.array_equal(a.stats.n, b.stats.n)
    assert np.array_equal(a.stats.rate_sum, b.stats.rate_sum)
    assert np.array_equal(a.stats.success, b.stats.success)


def test_seed_changes_result(net):
    lay, plan, *_ = net
    d = synthesize_demand(3, 5, 7, np.random.default_rng(7), theta=0.3)
    c = np.full((5, 7), 0.4)
    a = simulate(c, 2, d, lay, plan, RADIO, 3, 5000, seed=1)
    b = simulate(c, 2, d, lay, plan, RADIO, 3, 5000, seed=2)
    assert not np.array_equal(a.stats.rate_sum, b.stats.rate_sum)


def test_closed_form_agreement_small(net):
    lay, plan, rate, succ = net
    rng = np.random.default_rng(8)
    d = synthesize_demand(3, 6, 7, rng, theta=0.3, delta_a=1.0)
    c = _budget_policy(rng, 6, 7, 2)
    n = 300_000
    sim = simulate(c, 2, d, lay, plan, RADIO, 3, n, seed=3, epochs=n)
    for got, se, ref in (
        (sim.rate, sim.rate_se, user_utilities(c, d, rate)),
        (sim.success, sim.success_se, user_utilities(c, d, succ)),
    ):
        assert np.all(np.abs(got - ref) <= 4 * se + 1e-12)


def test_simulation_input_errors(net):
    lay, plan, *_ = net
    d = synthesize_demand(3, 5, 7, np.random.default_rng(0), theta=0.3)
    with pytest.raises(SimulationError):
        simulate(np.zeros((5, 7)), 1, d, lay, plan, RADIO, 3, 0)
    with pytest.raises(SimulationError):
        simulate(np.zeros((4, 7)), 1, d, lay, plan, RADIO, 3, 10)
    with pytest.raises(SimulationError):
        simulate(np.full((5, 7), 0.5), 1, d, lay, plan, RADIO, 3, 10)


def test_realize_caches_shape():
    caches = realize_caches(np.array([[1, 0], [0, 1], [0, 0]], dtype=float), 1, np.random.default_rng(0))
    assert caches.shape == (3, 2) and caches.sum(axis=0).tolist() == [1, 1]
    assert math.isclose(caches.mean(), 1 / 3)
