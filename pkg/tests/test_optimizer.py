import itertools

import numpy as np
import pytest
import scipy.sparse as sps
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from hetcache.demand import DemandModel, synthesize_demand
from hetcache.experiments import run_toy, toy_problem
from hetcache.optimizer import (
    CachingPolicy,
    GpSolveError,
    PolicyError,
    SpError,
    build_sp,
    policy_local_pop,
    policy_pop,
    solve_barrier,
    solve_p0,
)
from hetcache.optimizer.baselines import BaselineError, greedy_placement
from hetcache.optimizer.gp import LogSumExpAffine, condense
from hetcache.optimizer.oracle import combined_utility, deterministic_oracle, grid_lp_oracle
from hetcache.utility import UtilityTable, user_utilities

# --- toy instances ----------------------------------------------------------------


@pytest.mark.parametrize("name", ["single-homogeneous", "single-heterogeneous"])
def test_toy_single_network_optimum(name):
    res = run_toy(name, 0.0)
    assert np.allclose(res.policy.c[:, 0], [1, 0, 0], atol=1e-3)
    assert res.converged


def test_toy_single_fair_caches_third_file():
    res = run_toy("single-heterogeneous", 1.0)
    demand, table, n = toy_problem("single-heterogeneous")
    assert res.policy.c[2, 0] > 0.1
    oracle = grid_lp_oracle(demand, table, n, 1.0)
    assert abs(res.min_utility - oracle.value) <= 1e-3 * table.values.max()
    # the max-min optimum equalises both users' utilities
    tu = user_utilities(res.policy.c, demand, table)
    assert tu[0] == pytest.approx(tu[1], rel=1e-3)


def test_toy_two_cell_diversity():
    res = run_toy("two-heterogeneous", 0.0)
    c = res.policy.c
    assert np.allclose(c[:, 0], [1, 0, 0], atol=1e-3)
    assert np.allclose(c[:, 1], [0, 0, 1], atol=1e-3)


def test_toy_two_cell_homogeneous_matches_oracle():
    demand, table, n = toy_problem("two-homogeneous")
    res = run_toy("two-homogeneous", 0.0)
    oracle = deterministic_oracle(demand, table, n, 0.0)
    assert res.network_utility == pytest.approx(oracle.value, rel=1e-3)


# --- problem assembly -------------------------------------------------------------------


def _random_table(rng, n_cells, K, monotone=True):
    orders = []
    for cell in range(n_cells):
        for _ in range(2):
            rest = rng.permutation([b for b in range(n_cells) if b != cell])[: K - 1]
            orders.append([cell, *rest])
    vals = rng.uniform(0.1, 1.0, size=(len(orders), K + 1))
    if monotone:
        vals = -np.sort(-vals, axis=1)
    return UtilityTable.custom(orders, vals * 1e6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), K=st.integers(1, 3))
def test_product_form_reproduces_utilities(seed, K):
    rng = np.random.default_rng(seed)
    table = _random_table(rng, 3, K)
    demand = synthesize_demand(3, 4, 3, rng, theta=0.3, delta_a=1.0)
    prob = build_sp(demand, table, 2, 0.0)
    c = rng.uniform(0, 1, size=(4, 3))
    assert np.allclose(prob.user_utilities(1 - c), user_utilities(c, demand, table), rtol=1e-10)


def test_backhaul_form_differs_beyond_k1():
    rng = np.random.default_rng(5)
    table = _random_table(rng, 3, 2)
    demand = synthesize_demand(3, 4, 3, rng, theta=0.3)
    c = rng.uniform(0, 1, size=(4, 3))
    direct = user_utilities(c, demand, table)
    cons = build_sp(demand, table, 2, 0.0, form="consecutive")
    back = build_sp(demand, table, 2, 0.0, form="backhaul")
    assert np.allclose(cons.user_utilities(1 - c), direct)
    assert not np.allclose(back.user_utilities(1 - c), direct)
    t1 = _random_table(rng, 3, 1)
    b1 = build_sp(demand, t1, 2, 0.0, form="backhaul")
    assert np.allclose(b1.user_utilities(1 - c), user_utilities(c, demand, t1))


def test_negative_differences():
    table = UtilityTable.custom([[0, 1], [1, 0]], [3e6, 1e6, 2e6])
    demand = DemandModel([[1.0]], [1.0], [[0.5, 0.5]], [1.0])
    with pytest.raises(SpError, match="difference"):
        build_sp(demand, table, 1, 0.0)
    clamped = build_sp(demand, table, 1, 0.0, negative="clamp")
    assert clamped.n_clamped == 2
    kept = build_sp(demand, table, 1, 0.0, negative="keep")
    c = np.array([[0.3, 0.6]])
    assert np.allclose(kept.user_utilities(1 - c), user_utilities(c, demand, table))


def test_build_sp_rejects_bad_input():
    demand, table, _ = toy_problem("single-heterogeneous")
    with pytest.raises(SpError):
        build_sp(demand, table, 1, 1.5)
    with pytest.raises(SpError):
        build_sp(demand, table, -1, 0.0)


# --- convex building blocks -----------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    shift=st.lists(st.floats(-2, 2), min_size=3, max_size=3),
)
def test_condensation_is_tight_lower_bound(seed, shift):
    rng = np.random.default_rng(seed)
    A = rng.integers(0, 2, size=(5, 3)).astype(float)
    c = rng.normal(size=5)
    x0 = rng.normal(size=3)
    g, h = condense(sps.csr_matrix(A), c, x0)
    post = lambda x: np.exp(A @ x + c).sum()
    assert np.log(post(x0)) == pytest.approx(g @ x0 + h, abs=1e-10)
    x = x0 + np.array(shift)
    assert g @ x + h <= np.log(post(x)) + 1e-10


def test_barrier_matches_general_solver():
    # minimise 1/(x y) + x + y subject to x y^2 <= 4 in log variables
    A_obj = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    obj = LogSumExpAffine(A_obj, np.zeros(3))
    con = LogSumExpAffine(np.array([[1.0, 2.0]]), np.array([-np.log(4.0)]))
    res = solve_barrier(obj, [con], np.full(2, -5.0), np.full(2, 5.0), np.zeros(2))

    def f(x):
        return np.log(np.exp(A_obj @ x).sum())

    ref = minimize(f, np.zeros(2), constraints=[{"type": "ineq", "fun": lambda x: np.log(4) - x[0] - 2 * x[1]}],
                   bounds=[(-5, 5)] * 2, method="SLSQP", options={"ftol": 1e-14})
    assert res.value == pytest.approx(ref.fun, abs=1e-7)
    assert np.allclose(res.x, ref.x, atol=1e-4)
    assert res.gap <= 1e-9


def test_barrier_needs_feasible_start():
    obj = LogSumExpAffine(np.eye(2), np.zeros(2))
    con = LogSumExpAffine(np.array([[1.0, 0.0]]), np.array([0.0]))
    with pytest.raises(GpSolveError, match="strictly feasible"):
        solve_barrier(obj, [con], np.full(2, -3.0), np.full(2, 3.0), np.array([1.0, 0.0]))


# --- policies ----------------------------------------------------------------------------


def test_policy_validation():
    with pytest.raises(PolicyError):
        CachingPolicy([[0.8], [0.8]], 1).validate()
    with pytest.raises(PolicyError):
        CachingPolicy([[1.2]], 2).validate()
    CachingPolicy([[0.5], [0.5]], 1).validate()


@settings(max_examples=80, deadline=None)
@given(
    col=st.lists(st.sampled_from([0.0, 5e-5, 0.3, 0.5, 0.99995, 1.0]), min_size=4, max_size=4),
)
def test_rounding_keeps_budget(col):
    col = np.array(col)
    n_cache = max(col.sum(), 1e-9)
    pol = CachingPolicy(col[:, None], n_cache).rounded()
    pol.validate()
    # tiny entries always snap to zero; mass never moves by more than the snapped amount
    assert np.all(pol.c[col[:, None] <= 1e-4] == 0)
    assert np.abs(pol.c - col[:, None]).sum() <= 4 * 2e-4 + 1e-12


def test_solver_edge_budgets():
    demand, table, _ = toy_problem("single-heterogeneous")
    zero = solve_p0(demand, table, 0, 0.0)
    assert np.all(zero.policy.c == 0) and zero.converged
    full = solve_p0(demand, table, 3, 0.5)
    assert np.allclose(full.policy.c, 1, atol=1e-4)


def test_solver_trace_monotone_and_converged():
    rng = np.random.default_rng(2)
    demand = synthesize_demand(4, 6, 2, rng, theta=0.3, delta_a=1.0)
    table = _random_table(rng, 2, 2)
    for eta in (0.0, 0.5, 1.0):
        res = solve_p0(demand, table, 2, eta)
        assert res.trace.is_monotone()
        assert res.converged and res.trace.n_iter <= 50
        assert res.trace.step_norm[-1] <= 1e-4
        res.policy.validate()


@pytest.mark.parametrize("seed", range(6))
def test_matches_oracles_on_tiny_instances(seed):
    rng = np.random.default_rng(100 + seed)
    nb = 1 + seed % 2
    nf = 3 + seed % 2
    demand = synthesize_demand(3, nf, nb, rng, theta=rng.uniform(0, 1), delta_a=1.0)
    table = _random_table(rng, nb, nb)
    res0 = solve_p0(demand, table, 1, 0.0)
    o0 = deterministic_oracle(demand, table, 1, 0.0)
    got0 = combined_utility(res0.policy.c, demand, table, 0.0)
    assert got0 >= o0.value - 1e-3 * table.values.max()
    res1 = solve_p0(demand, table, 1, 1.0)
    o1 = grid_lp_oracle(demand, table, 1, 1.0)
    got1 = combined_utility(res1.policy.c, demand, table, 1.0)
    assert got1 >= o1.value - 1e-2 * table.values.max()
    if nb == 1:
        # a single column is one exact LP, so nothing can beat it
        assert got1 <= o1.value + 1e-6 * table.values.max()


def test_oracle_enumeration_count():
    demand, table, n = toy_problem("two-heterogeneous")
    res = deterministic_oracle(demand, table, n, 0.0)
    best = max(
        combined_utility(np.column_stack([a, b]), demand, table, 0.0)
        for a, b in itertools.product(np.vstack([np.zeros(3), np.eye(3)]), repeat=2)
    )
    assert res.value == pytest.approx(best)


# --- baselines -------------------------------------------------------------------------


def test_local_pop_top_files():
    Q = np.array([[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]])
    d = DemandModel(Q, [0.5, 0.5], np.eye(2), [0.4, 0.2, 0.4])
    pol = policy_local_pop(d, 1)
    assert np.array_equal(pol.c, [[1, 0], [0, 0], [0, 1]])
    with pytest.raises(BaselineError):
        policy_local_pop(d, 1.5)


def test_greedy_placement_hand_case():
    # one user next to BS 0 (rank 0) and BS 1 (rank 1); two files with weights 0.7 / 0.3
    orders = np.array([[0, 1]])
    values = np.array([[3.0, 2.0, 1.0]])
    weights = np.array([[0.7, 0.3]])
    c = greedy_placement(orders, values, weights, 2, 1)
    assert np.array_equal(c, [[1, 0], [0, 1]])


def test_policy_pop_ignores_preferences():
    demand, table, n = toy_problem("single-heterogeneous")
    res = policy_pop(demand, table, n, 1.0)
    # with identical users the fair and network optima coincide: cache the top file
    assert np.allclose(res.policy.c[:, 0], [1, 0, 0], atol=1e-3)
