"""Command-line entry point.

Exit codes: 0 on success, 2 when inputs fail validation, 3 when the solver
does not converge.  Every command writes a manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, load_config
from .demand import DemandError, DemandModel, average_similarity, empirical_demand, fit_mzipf, parse_request_log
from .geometry import GeometryError
from .io import FormatError, read_policy, write_json, write_manifest, write_policy, write_rows, write_trace
from .optimizer import GpSolveError, PolicyError
from .simulator import SimulationError, trace_requests
from .utility import RadioError, user_utilities

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 2, 3
VALIDATION_ERRORS = (ConfigError, DemandError, GeometryError, PolicyError, SimulationError, RadioError, FormatError, ValueError, FileNotFoundError)


class NotConverged(RuntimeError):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    return cfg.replace(metric=getattr(args, "metric", None), eta=getattr(args, "eta", None))


def _demand(args, cfg: ExperimentConfig, n_cells: int) -> DemandModel:
    if getattr(args, "demand", None):
        return DemandModel.load(args.demand)
    return ex.build_demand(cfg, args.seed, n_cells=n_cells)


def _out(args, cfg) -> Path:
    out = ex.output_dir(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_tables(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    sc = ex.build_scenario(cfg)
    path = out / f"table-{sc.eval_table.metric}.npz"
    sc.eval_table.to_npz(path)
    summary = {
        "metric": sc.eval_table.metric,
        "K": sc.K,
        "n_regions": sc.eval_table.n_regions,
        "rank_profile": sc.opt_table.rank_profile(),
        "max_error": float(sc.eval_table.errors.max()),
        "key": sc.eval_table.key,
    }
    s = write_json(out / "tables.json", summary)
    write_manifest(out, "tables", cfg, args.seed, [path, s], "ok")
    print(json.dumps({"rank_profile": [round(float(x), 6) for x in summary["rank_profile"]]}))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    demand = ex.build_demand(cfg, args.seed).validate()
    path = write_json(out / "demand.json", demand.to_dict())
    write_manifest(out, "synth", cfg, args.seed, [path], "ok", {"average_similarity": average_similarity(demand.Q)})
    print(f"demand: {demand.n_users} users, {demand.n_files} files, {demand.n_cells} cells -> {path}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    sc = ex.build_scenario(cfg)
    demand = _demand(args, cfg, sc.n_bs)
    pol, res = ex.compute_policy(args.policy, demand, sc, cfg.n_cache, cfg.eta, args.seed, ex.solver_kwargs(cfg))
    outputs = [write_policy(out / "policy.csv", pol, cfg.hash())]
    summary = {"policy": args.policy, "eta": cfg.eta, **ex.closed_form_metrics(pol.c, demand, sc.eval_table)}
    status = "ok"
    if res is not None:
        outputs.append(write_trace(out / "trace.csv", res.trace))
        summary.update(iterations=res.trace.n_iter, converged=res.converged)
        status = "ok" if res.converged else "not_converged"
    outputs.append(write_json(out / "optimize.json", summary))
    write_manifest(out, "optimize", cfg, args.seed, outputs, status)
    print(json.dumps({k: summary[k] for k in ("network", "min", "min_user")}))
    if status != "ok":
        raise NotConverged(f"solver stopped after {res.trace.n_iter} iterations without converging")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if args.requests is not None:
        if args.requests < 1:
            raise ConfigError("need at least one simulated request")
        cfg.simulation.n_requests = args.requests
    out = _out(args, cfg)
    sc = ex.build_scenario(cfg)
    demand = _demand(args, cfg, sc.n_bs)
    pol, recorded = read_policy(args.policy)
    if recorded and recorded != cfg.hash():
        print(f"warning: policy was produced under config {recorded}, evaluating under {cfg.hash()}", file=sys.stderr)
    closed = ex.closed_form_metrics(pol.c, demand, sc.eval_table)
    summary = {"closed_form": closed}
    outputs = []
    if sc.geometric:
        sim = ex.simulate_policy(pol, demand, sc, cfg.simulation.n_requests, args.seed, cfg.simulation.epochs, cfg.simulation.workers)
        rows = sim.rows()
        tu = user_utilities(pol.c, demand, sc.eval_table)
        for r in rows:
            r[f"closed_form_{sc.eval_table.metric}"] = tu[r["user"]]
        outputs.append(write_rows(out / "users.csv", rows))
        summary["simulated"] = ex.simulated_metrics(sim, sc.eval_table.metric)
        summary.update(n_requests=sim.n_requests, epochs=sim.epochs)
        if cfg.simulation.cdf_samples:
            tr = trace_requests(pol.c, pol.n_cache, demand, sc.layout, sc.plan, sc.radio, sc.K, cfg.simulation.cdf_samples, seed=args.seed)
            cdf = [{"user": int(u), "rate": float(r), "success": int(s), "backhaul": int(b)}
                   for u, r, s, b in zip(tr.requests.user, tr.rate, tr.success, tr.backhaul)]
            outputs.append(write_rows(out / "samples.csv", cdf))
    outputs.append(write_json(out / "evaluate.json", summary))
    write_manifest(out, "evaluate", cfg, args.seed, outputs, "ok")
    print(json.dumps(summary, default=float))
    return EXIT_OK


def _fit_report(pmf) -> dict:
    pmf = np.sort(np.asarray(pmf))[::-1]
    try:
        fit = fit_mzipf(pmf)
    except DemandError as err:
        return {"fitted": False, "reason": str(err), "size": len(pmf)}
    return {"fitted": True, "beta": fit.params.beta, "delta": fit.params.delta, "residual": fit.residual,
            "n_excluded": fit.n_excluded, "size": len(pmf)}


def cmd_ingest(args) -> int:
    cfg = _config(args)
    log_path = args.log or (cfg.resolve(cfg.demand["path"]) if cfg.demand.get("source") == "log" else None)
    if log_path is None:
        raise ConfigError("ingest needs --log or a config whose demand source is 'log'")
    out = _out(args, cfg)
    with open(log_path) as fh:
        log = parse_request_log(fh)
    emp = empirical_demand(log, args.top_users, args.top_items)
    demand = emp.model(n_cells=cfg.n_bs if cfg.table is None else 1)
    d = write_json(out / "demand.json", {**demand.to_dict(), "user_ids": emp.user_ids, "item_ids": emp.item_ids})
    report = {"popularity": _fit_report(emp.p), "activity": _fit_report(emp.v),
              "n_users": len(emp.user_ids), "n_items": len(emp.item_ids), "dropped_users": len(emp.dropped_users)}
    r = write_json(out / "mzipf.json", report)
    write_manifest(out, "ingest", cfg, args.seed, [d, r], "ok", {"log": str(log_path)})
    print(json.dumps({"v": demand.v.tolist()[:10], "p": demand.p.tolist()[:10]}))
    return EXIT_OK


def _grid(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad grid {text!r}") from None
    if not vals:
        raise ConfigError("sweep grid is empty")
    return vals


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    grid = _grid(args.grid)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    seeds = list(range(args.seed, args.seed + args.seeds))
    sc = ex.build_scenario(cfg)
    rows = ex.run_sweep(cfg, sc, args.axis, grid, policies, seeds, simulate=args.simulate, workers=args.workers)
    path = write_rows(out / f"sweep-{args.axis}.csv", rows, ex.SWEEP_COLUMNS)
    failed = sum(r["status"] == "failed" for r in rows)
    write_manifest(out, "sweep", cfg, args.seed, [path], "ok" if not failed else "partial",
                   {"axis": args.axis, "grid": grid, "policies": policies, "seeds": seeds, "simulate": args.simulate})
    print(f"{len(rows)} rows ({failed} failed) -> {path}")
    return EXIT_OK


def cmd_toy(args) -> int:
    names = sorted(ex.TOYS) if args.name == "all" else [args.name]
    etas = [args.eta] if args.eta is not None else [0.0, 1.0]
    results = []
    for name in names:
        for eta in etas:
            res = ex.run_toy(name, eta)
            results.append({"toy": name, "eta": eta, "policy": res.policy.c, "network": res.network_utility,
                            "min": res.min_utility, "converged": res.converged})
            col = "; ".join(" ".join(f"{x:.4f}" for x in res.policy.c[:, b]) for b in range(res.policy.n_bs))
            print(f"{name:22s} eta={eta:.2f}  c=[{col}]  network={res.network_utility / 1e6:.4f}  min={res.min_utility / 1e6:.4f} Mbps")
    if args.out:
        out = Path(args.out)
        path = write_json(out / "toy.json", results)
        write_manifest(out, "toy", None, None, [path], "ok")
    if not all(r["converged"] for r in results):
        raise NotConverged("a toy solve did not converge")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetcache", description="Caching policies for heterogeneous user demand.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, metric=True, eta=True):
        p.add_argument("--config", help="JSON config file or bundled name (toy1, toy2, desk, large)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output directory (default: config output_dir)")
        if metric:
            p.add_argument("--metric", choices=["rate", "success"])
        if eta:
            p.add_argument("--eta", type=float)

    p = sub.add_parser("tables", help="compute and cache utility tables")
    common(p, eta=False)
    p.set_defaults(func=cmd_tables)

    p = sub.add_parser("synth", help="synthesize a demand model")
    common(p, metric=False, eta=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("optimize", help="compute a caching policy")
    common(p)
    p.add_argument("--demand", help="demand JSON (default: from config)")
    p.add_argument("--policy", default="p0", choices=ex.POLICIES)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evaluate", help="closed-form and simulated metrics of a policy file")
    common(p, eta=False)
    p.add_argument("--policy", required=True, help="policy CSV")
    p.add_argument("--demand", help="demand JSON (default: from config)")
    p.add_argument("--requests", type=int, help="number of simulated requests")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ingest", help="demand model and M-Zipf fits from a request log")
    common(p, metric=False, eta=False)
    p.add_argument("--log", help="tab-separated user/item/count log")
    p.add_argument("--top-users", type=int, default=100)
    p.add_argument("--top-items", type=int, default=500)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("sweep", help="policies across a parameter grid")
    common(p)
    p.add_argument("--axis", required=True, choices=ex.SWEEP_AXES)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--policies", default="policy1,policy2,policy1_pop,policy2_pop,local_pop,femtocaching,femtocaching_up")
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds starting at --seed")
    p.add_argument("--simulate", action="store_true", help="report simulated instead of closed-form metrics")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("toy", help="solve the two-user hand-made examples")
    p.add_argument("--name", default="all", choices=["all", *sorted(ex.TOYS)])
    p.add_argument("--eta", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_toy)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.time()
    try:
        code = args.func(args)
    except (NotConverged, GpSolveError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    print(f"done in {time.time() - t0:.1f} s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
