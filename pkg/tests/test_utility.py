import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import exp1

from hetcache.cubature import integrate_polygon, integrate_triangles
from hetcache.demand import DemandModel
from hetcache.expint import e1, exp_integral, scaled_e1
from hetcache.geometry import assign_frequencies, build_layout, build_subregions
from hetcache.utility import (
    RadioConfig,
    RadioError,
    UtilityTable,
    backhaul_rate,
    compute_utility_tables,
    conditional_rate,
    delivery_probabilities,
    local_hit_utilities,
    min_utility,
    network_utility,
    point_utilities,
    success_integrand,
    user_utilities,
)

RADIO = RadioConfig()


@pytest.fixture(scope="module")
def hex_setup(tmp_path_factory):
    lay = build_layout("hexagonal", 7, 40.0)
    sub = build_subregions(lay, 3)
    plan = assign_frequencies(lay, sub)
    cache = tmp_path_factory.mktemp("tables")
    return lay, sub, plan, cache


# --- special functions --------------------------------------------------------


def test_e1_matches_scipy():
    # the power series loses a few digits to cancellation near its switch point
    t = np.concatenate([np.geomspace(1e-8, 6, 200), np.linspace(6.01, 700, 200)])
    assert np.allclose(e1(t), exp1(t), rtol=1e-10, atol=0)


def test_scaled_e1_large_argument():
    t = np.geomspace(1, 1e12, 100)
    ref = np.exp(np.minimum(t, 700)) * exp1(np.minimum(t, 700))
    small = t <= 700
    assert np.allclose(scaled_e1(t[small]), ref[small], rtol=1e-12)
    # asymptotics 1/t - 1/t^2 for huge t
    big = t[t > 1e6]
    assert np.allclose(scaled_e1(big), 1 / big - 1 / big**2, rtol=1e-10)


def test_ei_negative():
    x = -np.geomspace(1e-6, 50, 50)
    assert np.allclose(exp_integral(x), -exp1(-x), rtol=1e-12)


def test_e1_domain():
    with pytest.raises(ValueError):
        e1([0.0])


# --- cubature -----------------------------------------------------------------


def test_cubature_polynomial_exact():
    square = np.array([[0, 0], [2, 0], [2, 1], [0, 1]], dtype=float)
    res = integrate_polygon(lambda p: (p[:, 0] ** 3 * p[:, 1] ** 2)[:, None], square, rtol=1e-12)
    assert res.value[0] == pytest.approx(4 / 3, rel=1e-12)


def test_cubature_singular_corner():
    # 1/r^alpha-like peak at the corner is handled by refinement
    tri = np.array([[[0, 0], [1, 0], [0, 1]]], dtype=float)
    res = integrate_triangles(lambda p: np.sqrt(np.hypot(p[:, 0], p[:, 1]))[:, None], tri, rtol=1e-8)
    # polar integral of r^{1/2} over the unit right triangle
    from scipy.integrate import dblquad

    ref, _ = dblquad(lambda y, x: math.sqrt(math.hypot(x, y)), 0, 1, 0, lambda x: 1 - x, epsabs=1e-13)
    assert res.value[0] == pytest.approx(ref, rel=1e-7)


# --- point-wise link quantities against Monte Carlo fading ------------------------------


def _mc_sinr(pt, y, serving, others, n_samples=400_000, seed=0):
    rng = np.random.default_rng(seed)
    r = np.linalg.norm(y - pt, axis=1)
    lam = r ** RADIO.pathloss_exp
    h = rng.exponential(size=(n_samples, 1 + len(others)))
    s = h[:, 0] / lam[serving]
    i = (h[:, 1:] / lam[others]).sum(axis=1) if len(others) else 0.0
    return s / (i + RADIO.noise_ratio)


@pytest.mark.parametrize("pt,serving,others", [
    ((10.0, 5.0), 0, [1, 3]),
    ((30.0, -12.0), 1, [0]),
    ((5.0, 5.0), 0, []),
    ((20.0, 11.547), 1, [2, 4, 6]),
])
def test_link_quantities_vs_monte_carlo(pt, serving, others):
    y = build_layout("hexagonal", 7, 40.0).bs_coords
    pt = np.array(pt)
    co = [serving] + others
    sinr = _mc_sinr(pt, y, serving, np.array(others, dtype=int))
    n = len(sinr)

    rate = RADIO.bandwidth_hz * np.log2(1 + sinr)
    got = conditional_rate(pt[None], y, serving, co, RADIO)[0]
    assert abs(got - rate.mean()) <= 4 * rate.std() / math.sqrt(n)

    hit = sinr > RADIO.gamma0
    got = success_integrand(pt[None], y, serving, co, RADIO)[0]
    q = min(max(hit.mean(), 1.0 / n), 1 - 1.0 / n)
    assert abs(got - hit.mean()) <= 4 * math.sqrt(q * (1 - q) / n)

    capped = np.minimum(rate, RADIO.backhaul_bps)
    got = backhaul_rate(pt[None], y, serving, co, RADIO)[0]
    # one sample's weight is the resolution floor when every draw hits the cap
    assert abs(got - capped.mean()) <= 4 * capped.std() / math.sqrt(n) + RADIO.backhaul_bps / n


def test_equal_interferers_continuous():
    # the two interferers sit at identical distance: the jittered closed form stays continuous
    y = build_layout("hexagonal", 7, 40.0).bs_coords
    mid = np.array([[0.0, 0.0]]) + 1e-3
    sym = (y[1] + y[2]) / 2 * 0.1
    a, jit = conditional_rate(sym[None], y, 0, [0, 1, 2], RADIO, return_jitter=True)
    b = conditional_rate(sym[None] + [1e-4, 0], y, 0, [0, 1, 2], RADIO)
    assert jit == 1
    assert a[0] == pytest.approx(b[0], rel=1e-5)
    assert np.isfinite(conditional_rate(mid, y, 0, [0], RADIO)).all()


def test_radio_validation():
    with pytest.raises(RadioError):
        RadioConfig(pathloss_exp=2.0)
    with pytest.raises(RadioError):
        RadioConfig(bandwidth_hz=0)


def test_rate_decreases_with_distance():
    y = build_layout("hexagonal", 7, 40.0).bs_coords
    pts = np.column_stack([np.linspace(1, 40, 30), np.zeros(30)])
    r = conditional_rate(pts, y, 0, [0, 1, 4], RADIO)
    assert np.all(np.diff(r) < 0)


# --- tables ------------------------------------------------------------------------


def test_hex_tables(hex_setup):
    lay, sub, plan, cache = hex_setup
    rank = compute_utility_tables(lay, sub, plan, RADIO, cache_dir=cache)
    exact = compute_utility_tables(lay, sub, plan, RADIO, cache_dir=cache, collapse="none")
    prof = rank.rank_profile()
    assert np.all(np.diff(prof) < 0)
    assert prof[-1] <= RADIO.backhaul_bps
    assert np.allclose(rank.values, prof)
    # the collapsed row is the area average of the exact rows
    areas = np.array([r.area for r in sub.regions])
    assert np.allclose(areas @ exact.values / areas.sum(), prof, rtol=1e-12)
    # hexagonal symmetry: the centre cell regions are congruent
    centre = exact.values[exact.cell == 0]
    assert np.allclose(centre, centre[0], rtol=1e-3)
    assert np.all(exact.errors <= 1e-4 * np.abs(exact.values) + 1e-9)


def test_table_cache_roundtrip(hex_setup, tmp_path):
    lay, sub, plan, _ = hex_setup
    a = compute_utility_tables(lay, sub, plan, RADIO, metric="success", cache_dir=tmp_path, collapse="none")
    files = list(tmp_path.glob("table-*.npz"))
    assert len(files) == 1
    b = compute_utility_tables(lay, sub, plan, RADIO, metric="success", cache_dir=tmp_path, collapse="none")
    assert np.array_equal(a.values, b.values) and a.key == b.key
    assert np.all(a.values[:, -1] == 0)
    assert np.all((a.values >= 0) & (a.values <= 1))


def test_table_key_depends_on_radio(hex_setup, tmp_path):
    lay, sub, plan, _ = hex_setup
    compute_utility_tables(lay, sub, plan, RADIO, metric="success", cache_dir=tmp_path)
    compute_utility_tables(lay, sub, plan, RadioConfig(gamma0_db=0.0), metric="success", cache_dir=tmp_path)
    assert len(list(tmp_path.glob("table-*.npz"))) == 2


def test_table_matches_point_average(hex_setup):
    # independent route: average point utilities over uniform samples of one region
    lay, sub, plan, cache = hex_setup
    exact = compute_utility_tables(lay, sub, plan, RADIO, metric="success", cache_dir=cache, collapse="none")
    r = 3
    reg = sub.regions[r]
    from hetcache.geometry import sample_in_polygon

    pts = sample_in_polygon(reg.polygon, 4000, np.random.default_rng(0))
    orders, vals = point_utilities(lay, plan, RADIO, pts, 3, metric="success")
    assert np.all(orders == np.array(reg.order))
    se = vals.std(axis=0) / math.sqrt(len(pts)) + 1e-12
    assert np.all(np.abs(vals.mean(axis=0) - exact.values[r]) <= 4 * se)


# --- expected utilities -----------------------------------------------------------------

TOY_Q = np.array([[0.75, 0.25, 0.0], [0.02, 0.38, 0.60]])
TOY_V = np.array([0.6, 0.4])


def toy_single():
    d = DemandModel(TOY_Q, TOY_V, np.ones((2, 1)), TOY_V @ TOY_Q)
    return d, UtilityTable.custom([[0]], [3e6, 1e6])


def test_toy_hand_value():
    d, t = toy_single()
    c = np.array([[1.0], [0.0], [0.0]])
    assert network_utility(c, d, t) == pytest.approx(1.916e6)
    assert np.allclose(user_utilities(c, d, t), [2.5e6, 1.04e6])
    assert min_utility(c, d, t) == pytest.approx((1.04e6, 1))


def test_two_cell_hand_value():
    A = np.eye(2)
    d = DemandModel(TOY_Q, TOY_V, A, TOY_V @ TOY_Q)
    t = UtilityTable.custom([[0, 1], [1, 0]], [3e6, 2e6, 1e6])
    c = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    # user 0 sits in cell 0: file 1 local, file 3 from the neighbour, file 2 over backhaul
    assert np.allclose(user_utilities(c, d, t), [0.75 * 3e6 + 0.25 * 1e6, 0.02 * 2e6 + 0.38 * 1e6 + 0.6 * 3e6])


def test_delivery_probabilities_hand():
    t = UtilityTable.custom([[0, 1]], [3.0, 2.0, 1.0], n_cells=2)
    P = delivery_probabilities([[0.5, 0.4]], t)
    assert np.allclose(P[0, 0], [0.5, 0.5 * 0.4, 0.5 * 0.6])


def test_local_hit_bound():
    d, t = toy_single()
    assert np.allclose(local_hit_utilities(d, t), 3e6)
    c = np.ones((3, 1))
    assert np.allclose(user_utilities(c, d, t), local_hit_utilities(d, t))


def test_policy_shape_errors():
    d, t = toy_single()
    with pytest.raises(ValueError):
        network_utility(np.zeros((3, 2)), d, t)
    with pytest.raises(ValueError):
        network_utility(np.zeros((2, 1)), d, t)
    with pytest.raises(ValueError):
        network_utility(np.full((3, 1), 1.5), d, t)


@settings(max_examples=50, deadline=None)
@given(
    c=st.lists(st.floats(0, 1), min_size=6, max_size=6),
    bump=st.floats(0, 1),
    idx=st.integers(0, 5),
)
def test_utility_monotone_in_policy(c, bump, idx):
    # raising any caching probability never lowers any user's utility when values decrease by rank
    A = np.array([[0.7, 0.3], [0.2, 0.8]])
    d = DemandModel(TOY_Q, TOY_V, A, TOY_V @ TOY_Q)
    t = UtilityTable.custom([[0, 1], [1, 0]], [3e6, 2e6, 1e6])
    c = np.array(c).reshape(3, 2)
    c2 = c.copy().ravel()
    c2[idx] = c2[idx] + bump * (1 - c2[idx])
    c2 = c2.reshape(3, 2)
    assert np.all(user_utilities(c2, d, t) >= user_utilities(c, d, t) - 1e-6)


@settings(max_examples=50, deadline=None)
@given(c=st.lists(st.floats(0, 1), min_size=6, max_size=6))
def test_delivery_probabilities_sum_to_one(c):
    t = UtilityTable.custom([[0, 1], [1, 0]], [3.0, 2.0, 1.0])
    P = delivery_probabilities(np.array(c).reshape(3, 2), t)
    assert np.allclose(P.sum(axis=2), 1.0) and np.all(P >= 0)
