"""Experiment configuration: JSON files validated before any computation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .utility.tables import METRICS

DEMAND_SOURCES = ("synthesize", "inline", "file", "log")
LAYOUT_KINDS = ("hexagonal", "explicit")
BUNDLED = ("toy1", "toy2", "desk", "large")


class ConfigError(ValueError):
    pass


@dataclass
class SolverSettings:
    tol: float = 1e-4
    max_iter: int = 50
    polish: bool = True
    extrapolate: bool = False


@dataclass
class SimulationSettings:
    n_requests: int = 200_000
    epochs: int = 100
    workers: int = 1
    cdf_samples: int = 10_000


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run, together with a seed.

    ``table`` optionally replaces the geometric utility tables by a
    hand-specified one (``{"orders": ..., "values": ...}``).  Such configs
    can be optimised and evaluated in closed form but not simulated.
    """

    layout: dict = field(default_factory=lambda: {"kind": "hexagonal", "n_bs": 7, "cell_radius_m": 40.0})
    K: int = 3
    radio: dict = field(default_factory=dict)
    n_users: int = 10
    n_files: int = 30
    n_cache: float = 3
    demand: dict = field(default_factory=lambda: {"source": "synthesize"})
    metric: str = "rate"
    eta: float = 0.0
    solver: SolverSettings = field(default_factory=SolverSettings)
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    output_dir: str = "out"
    table: dict | None = None
    base_dir: str = "."

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def replace(self, **changes) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        for k, v in changes.items():
            if v is not None:
                setattr(new, k, v)
        return new.validate()

    @property
    def n_bs(self) -> int:
        if self.table is not None:
            return int(max(max(row) for row in self.table["orders"])) + 1
        if self.layout.get("kind", "hexagonal") == "explicit":
            return len(self.layout.get("coords", []))
        return int(self.layout.get("n_bs", 7))

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(int(self.n_users) >= 1, "n_users must be at least 1")
        need(int(self.n_files) >= 1, "n_files must be at least 1")
        need(float(self.n_cache) >= 0, "n_cache must be nonnegative")
        need(0.0 <= float(self.eta) <= 1.0, "eta must lie in [0, 1]")
        need(self.metric in METRICS, f"metric must be one of {METRICS}")
        need(int(self.K) >= 1, "K must be at least 1")
        need(self.solver.tol > 0, "solver tol must be positive")
        need(int(self.solver.max_iter) >= 1, "solver max_iter must be at least 1")
        sim = self.simulation
        need(int(sim.n_requests) >= 1, "simulation n_requests must be at least 1")
        need(int(sim.epochs) >= 1, "simulation epochs must be at least 1")
        need(int(sim.workers) >= 1, "simulation workers must be at least 1")
        need(int(sim.cdf_samples) >= 0, "simulation cdf_samples must be nonnegative")
        if self.table is None:
            kind = self.layout.get("kind", "hexagonal")
            need(kind in LAYOUT_KINDS, f"layout kind must be one of {LAYOUT_KINDS}")
            need(float(self.layout.get("cell_radius_m", 40.0)) > 0, "cell_radius_m must be positive")
            if kind == "explicit":
                need(len(self.layout.get("coords", [])) >= 1, "explicit layout needs coords")
            need(int(self.K) <= self.n_bs, "K cannot exceed the number of BSs")
        else:
            need("orders" in self.table and "values" in self.table, "table needs 'orders' and 'values'")
        src = self.demand.get("source", "synthesize")
        need(src in DEMAND_SOURCES, f"demand source must be one of {DEMAND_SOURCES}")
        if src in ("file", "log"):
            need("path" in self.demand, f"demand source {src!r} needs a path")
            need(self.resolve(self.demand["path"]).is_file(), f"demand file {self.demand['path']} does not exist")
        if src == "inline":
            for key in ("Q", "v", "A", "p"):
                need(key in self.demand, f"inline demand needs {key!r}")
        if src == "synthesize":
            d = self.demand
            need(d.get("theta") is None or 0.0 <= float(d["theta"]) <= 1.0, "theta must lie in [0, 1]")
            need(d.get("target_sim") is None or 0.0 <= float(d["target_sim"]) <= 1.0, "target_sim must lie in [0, 1]")
            for key in ("delta_p", "delta_v", "delta_a"):
                need(float(d.get(key, 0.0)) >= 0, f"{key} must be nonnegative")
        return self


def config_from_dict(d: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    d = dict(d)
    known = set(ExperimentConfig.__dataclass_fields__) - {"base_dir"}
    unknown = set(d) - known - {"description"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    d.pop("description", None)
    try:
        solver = SolverSettings(**d.pop("solver", {}))
        sim = SimulationSettings(**d.pop("simulation", {}))
        cfg = ExperimentConfig(solver=solver, simulation=sim, base_dir=str(base_dir), **d)
    except TypeError as err:
        raise ConfigError(str(err)) from None
    return cfg.validate()


def bundled_config_path(name: str) -> Path:
    return Path(str(resources.files("hetcache") / "configs" / f"{name}.json"))


def load_config(path_or_name: str | Path) -> ExperimentConfig:
    """Load a JSON config file, or a bundled one by name (``toy1``, ``desk``, ...)."""
    path = Path(path_or_name)
    if not path.is_file() and str(path_or_name) in BUNDLED:
        path = bundled_config_path(str(path_or_name))
    if not path.is_file():
        raise ConfigError(f"config {path_or_name} not found")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    return config_from_dict(d, base_dir=path.parent)
