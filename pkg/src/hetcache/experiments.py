"""Experiment plumbing shared by the CLI and the acceptance tests.

Builds scenarios and demand models from a config, computes every policy
by name, runs the small hand-made examples and parameter sweeps.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .demand import (
    DemandModel,
    calibrate_theta,
    empirical_demand,
    mzipf_pmf,
    parse_request_log,
    synthesize_demand,
)
from .geometry import FrequencyPlan, NetworkLayout, SubregionTable, assign_frequencies, build_subregions, layout_from_config
from .optimizer import CachingPolicy, SolveResult, policy_femtocaching, policy_local_pop, policy_pop, solve_p0
from .simulator import DEFAULT_EPOCHS, SimulationResult, simulate
from .utility import RadioConfig, UtilityTable, compute_utility_tables, min_utility, network_utility

# ---------------------------------------------------------------------------
# hand-made examples
# ---------------------------------------------------------------------------

TOY_P = np.array([0.46, 0.30, 0.24])
TOY_V = np.array([0.6, 0.4])
TOY_Q_HET = np.array([[0.75, 0.25, 0.0], [0.02, 0.38, 0.60]])

TOYS = {
    "single-homogeneous": (1, False),
    "single-heterogeneous": (1, True),
    "two-homogeneous": (2, False),
    "two-heterogeneous": (2, True),
}


def toy_demand(n_cells: int, heterogeneous: bool) -> DemandModel:
    """Two users, three files.  One shared cell, or one cell each."""
    Q = TOY_Q_HET.copy() if heterogeneous else np.tile(TOY_P, (2, 1))
    A = np.ones((2, 1)) if n_cells == 1 else np.eye(2)
    return DemandModel(Q, TOY_V.copy(), A, TOY_P.copy())


def toy_table(n_cells: int) -> UtilityTable:
    """3 Mbps from the local BS and 1 Mbps over backhaul; 2 Mbps from the other BS."""
    if n_cells == 1:
        return UtilityTable.custom([[0]], [3e6, 1e6])
    return UtilityTable.custom([[0, 1], [1, 0]], [3e6, 2e6, 1e6])


def toy_problem(name: str) -> tuple[DemandModel, UtilityTable, int]:
    if name not in TOYS:
        raise ValueError(f"unknown toy {name!r}; choose from {sorted(TOYS)}")
    n_cells, het = TOYS[name]
    return toy_demand(n_cells, het), toy_table(n_cells), 1


def run_toy(name: str, eta: float, **solver_kw) -> SolveResult:
    demand, table, n_cache = toy_problem(name)
    return solve_p0(demand, table, n_cache, eta, **solver_kw)


# ---------------------------------------------------------------------------
# scenarios and demand
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """Network geometry plus two utility tables.

    ``opt_table`` is what the optimiser sees (per-rank averages on the
    hexagonal layout); ``eval_table`` keeps every sub-region's own values
    and is used for reporting.
    """

    layout: NetworkLayout | None
    subregions: SubregionTable | None
    plan: FrequencyPlan | None
    radio: RadioConfig
    K: int
    opt_table: UtilityTable
    eval_table: UtilityTable

    @property
    def n_bs(self) -> int:
        return self.opt_table.n_cells

    @property
    def geometric(self) -> bool:
        return self.layout is not None


def build_scenario(cfg: ExperimentConfig, metric: str | None = None, cache_dir=None) -> Scenario:
    metric = metric or cfg.metric
    radio = RadioConfig.from_dict(cfg.radio)
    if cfg.table is not None:
        tab = UtilityTable.custom(cfg.table["orders"], cfg.table["values"], cfg.table.get("weights"), metric=metric)
        return Scenario(None, None, None, radio, tab.K, tab, tab)
    layout = layout_from_config(cfg.layout)
    subregions = build_subregions(layout, cfg.K)
    plan = assign_frequencies(layout, subregions)
    exact = compute_utility_tables(layout, subregions, plan, radio, metric, cache_dir=cache_dir, collapse="none")
    opt = compute_utility_tables(layout, subregions, plan, radio, metric, cache_dir=cache_dir)
    return Scenario(layout, subregions, plan, radio, cfg.K, opt, exact)


def demand_params(cfg: ExperimentConfig) -> dict:
    d = cfg.demand
    return {
        "delta_p": float(d.get("delta_p", 0.6)),
        "delta_v": float(d.get("delta_v", 0.4)),
        "delta_a": float(d.get("delta_a", 1.0)),
        "beta_p": float(d.get("beta_p", 0.0)),
        "beta_v": float(d.get("beta_v", 0.0)),
    }


def theta_for(cfg: ExperimentConfig, target_sim: float | None = None, **overrides) -> float:
    """Mixing weight giving the requested average preference similarity."""
    d = cfg.demand
    target = d.get("target_sim") if target_sim is None else target_sim
    if target is None:
        return float(d.get("theta", 1.0))
    prm = {**demand_params(cfg), **overrides}
    p = mzipf_pmf(prm["beta_p"], prm["delta_p"], cfg.n_files)
    v = mzipf_pmf(prm["beta_v"], prm["delta_v"], cfg.n_users)
    return calibrate_theta(p, v, float(target), n_seeds=int(d.get("calibration_seeds", 10)))


def build_demand(cfg: ExperimentConfig, seed: int, n_cells: int | None = None, theta: float | None = None, **overrides) -> DemandModel:
    """Demand model described by the config; ``overrides`` change M-Zipf exponents."""
    src = cfg.demand.get("source", "synthesize")
    n_cells = cfg.n_bs if n_cells is None else n_cells
    if src == "inline":
        d = cfg.demand
        return DemandModel(np.array(d["Q"], float), np.array(d["v"], float), np.array(d["A"], float), np.array(d["p"], float))
    if src == "file":
        return DemandModel.load(cfg.resolve(cfg.demand["path"]))
    if src == "log":
        with open(cfg.resolve(cfg.demand["path"])) as fh:
            log = parse_request_log(fh)
        emp = empirical_demand(log, int(cfg.demand.get("top_users", 100)), int(cfg.demand.get("top_items", 500)))
        return emp.model(n_cells=n_cells)
    prm = {**demand_params(cfg), **overrides}
    if theta is None:
        theta = theta_for(cfg, **overrides)
    return synthesize_demand(cfg.n_users, cfg.n_files, n_cells, np.random.default_rng(seed), theta=theta, **prm)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

POLICIES = ("p0", "policy1", "policy2", "policy1_pop", "policy2_pop", "local_pop", "femtocaching", "femtocaching_up")
# policies that only look at global popularity
POPULARITY_POLICIES = ("policy1_pop", "policy2_pop", "femtocaching")


def solver_kwargs(cfg: ExperimentConfig) -> dict:
    s = cfg.solver
    return {"tol": s.tol, "max_iter": s.max_iter, "polish": s.polish, "extrapolate": s.extrapolate}


def compute_policy(
    name: str,
    demand: DemandModel,
    scenario: Scenario,
    n_cache: float,
    eta: float = 0.0,
    seed: int = 0,
    solver_kw: dict | None = None,
) -> tuple[CachingPolicy, SolveResult | None]:
    """Policy by name.  ``p0`` uses ``eta``; ``policy1``/``policy2`` fix it to 0/1."""
    kw = solver_kw or {}
    table = scenario.opt_table
    if name in ("p0", "policy1", "policy2"):
        e = {"p0": eta, "policy1": 0.0, "policy2": 1.0}[name]
        res = solve_p0(demand, table, n_cache, e, **kw)
        return res.policy, res
    if name in ("policy1_pop", "policy2_pop"):
        res = policy_pop(demand, table, n_cache, 0.0 if name == "policy1_pop" else 1.0, **kw)
        return res.policy, res
    if name == "local_pop":
        return policy_local_pop(demand, n_cache), None
    if name in ("femtocaching", "femtocaching_up"):
        if not scenario.geometric:
            raise ValueError("femtocaching needs a geometric layout")
        mode = "popularity" if name == "femtocaching" else "preference"
        rng = np.random.default_rng([seed, 1])
        pol = policy_femtocaching(demand, scenario.layout, scenario.plan, scenario.radio, scenario.K, n_cache, rng=rng, mode=mode, metric=table.metric)
        return pol, None
    raise ValueError(f"unknown policy {name!r}; choose from {POLICIES}")


def closed_form_metrics(c, demand: DemandModel, table: UtilityTable) -> dict:
    tm, um = min_utility(c, demand, table)
    return {"network": network_utility(c, demand, table), "min": tm, "min_user": um}


def simulate_policy(policy: CachingPolicy, demand: DemandModel, scenario: Scenario, n_requests: int, seed: int, epochs: int | None = None, workers: int = 1) -> SimulationResult:
    if not scenario.geometric:
        raise ValueError("simulation needs a geometric layout")
    return simulate(
        policy.c, policy.n_cache, demand, scenario.layout, scenario.plan, scenario.radio, scenario.K,
        n_requests, seed=seed, epochs=epochs if epochs is not None else DEFAULT_EPOCHS, workers=workers,
    )


def simulated_metrics(sim: SimulationResult, metric: str) -> dict:
    per_user = sim.rate if metric == "rate" else sim.success
    ok = sim.defined
    vals = np.where(ok, per_user, np.inf)
    um = int(np.argmin(vals))
    net = sim.network_rate if metric == "rate" else sim.network_success
    return {"network": float(net), "min": float(vals[um]), "min_user": um}


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("similarity", "delta_a", "delta_v", "eta")
SWEEP_COLUMNS = [
    "axis", "value", "seed", "policy", "network", "min", "min_user",
    "opt_network", "opt_min", "iterations", "final_step", "converged", "monotone", "status", "error",
]


@dataclass
class SweepCell:
    cfg: ExperimentConfig
    scenario: Scenario
    axis: str
    value: float
    seed: int
    policies: tuple
    theta: float | None
    simulate: bool


def _demand_for(cell: SweepCell) -> tuple[DemandModel, float]:
    cfg, axis, x = cell.cfg, cell.axis, cell.value
    eta = float(x) if axis == "eta" else cfg.eta
    overrides = {}
    if axis == "delta_a":
        overrides["delta_a"] = float(x)
    elif axis == "delta_v":
        overrides["delta_v"] = float(x)
    demand = build_demand(cfg, cell.seed, n_cells=cell.scenario.n_bs, theta=cell.theta, **overrides)
    return demand, eta


def run_cell(cell: SweepCell) -> list[dict]:
    """All policies at one (grid value, seed); failures are recorded, not raised."""
    base = {"axis": cell.axis, "value": cell.value, "seed": cell.seed}
    try:
        demand, eta = _demand_for(cell)
    except Exception as err:  # noqa: BLE001 - a sweep keeps going past a bad cell
        return [{**base, "policy": p, "status": "failed", "error": f"{type(err).__name__}: {err}"} for p in cell.policies]
    rows = []
    cfg = cell.cfg
    for name in cell.policies:
        row = {**base, "policy": name, "error": ""}
        try:
            pol, res = compute_policy(name, demand, cell.scenario, cfg.n_cache, eta, cell.seed, solver_kwargs(cfg))
            if cell.simulate:
                sim = simulate_policy(pol, demand, cell.scenario, cfg.simulation.n_requests, cell.seed, cfg.simulation.epochs)
                row.update(simulated_metrics(sim, cell.scenario.eval_table.metric))
            else:
                row.update(closed_form_metrics(pol.c, demand, cell.scenario.eval_table))
            # the same policy scored on the table the optimiser saw
            opt = closed_form_metrics(pol.c, demand, cell.scenario.opt_table)
            row.update(opt_network=opt["network"], opt_min=opt["min"])
            row["iterations"] = res.trace.n_iter if res is not None else 0
            row["final_step"] = res.trace.step_norm[-1] if res is not None and res.trace.step_norm else 0.0
            row["converged"] = res.converged if res is not None else True
            row["monotone"] = res.trace.is_monotone() if res is not None else True
            row["status"] = "ok" if row["converged"] else "not_converged"
        except Exception as err:  # noqa: BLE001
            row.update(status="failed", error=f"{type(err).__name__}: {err}")
        rows.append(row)
    return rows


def run_sweep(
    cfg: ExperimentConfig,
    scenario: Scenario,
    axis: str,
    grid,
    policies=("policy1", "policy2"),
    seeds=(0,),
    simulate: bool = False,
    workers: int = 1,
) -> list[dict]:
    """Rows of ``SWEEP_COLUMNS``, one per (grid value, seed, policy).

    Grid points for the ``similarity`` axis are target average cosine
    similarities; the mixing weight is calibrated once per point.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    grid = [float(x) for x in grid]
    if not grid:
        raise ValueError("sweep grid is empty")
    bad = [p for p in policies if p not in POLICIES]
    if bad:
        raise ValueError(f"unknown policies {bad}; choose from {POLICIES}")
    if axis == "eta" and any(not 0.0 <= x <= 1.0 for x in grid):
        raise ValueError("eta grid values must lie in [0, 1]")
    cells = []
    for x in grid:
        theta = None
        if cfg.demand.get("source", "synthesize") == "synthesize":
            theta = theta_for(cfg, target_sim=x) if axis == "similarity" else theta_for(cfg)
        for s in seeds:
            cells.append(SweepCell(cfg, scenario, axis, x, int(s), tuple(policies), theta, simulate))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(run_cell, cells))
    else:
        chunks = [run_cell(c) for c in cells]
    return [r for chunk in chunks for r in chunk]


def default_workers() -> int:
    return max(1, min(8, (os.cpu_count() or 1)))


def output_dir(cfg: ExperimentConfig, out: str | None) -> Path:
    return Path(out) if out else Path(cfg.output_dir)
