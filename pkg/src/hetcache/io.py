"""Reading and writing policies, traces, tables of results and run manifests."""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import tempfile
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .optimizer import CachingPolicy, SolverTrace


class FormatError(ValueError):
    pass


def atomic_write(path: str | Path, text: str) -> Path:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def write_rows(path, rows: list[dict], columns: list[str] | None = None) -> Path:
    """CSV with a fixed column order (taken from the first row if not given)."""
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return atomic_write(path, buf.getvalue())


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# policy files: two comment lines, then a file-by-BS grid
def write_policy(path, policy: CachingPolicy, config_hash: str = "") -> Path:
    buf = io.StringIO()
    buf.write(f"# n_cache={policy.n_cache!r}\n")
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["file"] + [f"bs{b}" for b in range(policy.n_bs)])
    for f, row in enumerate(policy.c):
        w.writerow([f] + [repr(float(x)) for x in row])
    return atomic_write(path, buf.getvalue())


def read_policy(path) -> tuple[CachingPolicy, str]:
    """Policy and the config hash recorded with it."""
    meta = {}
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
            else:
                rows.append(line)
    if "n_cache" not in meta:
        raise FormatError(f"{path}: missing n_cache header")
    data = list(csv.reader(rows))
    if len(data) < 2:
        raise FormatError(f"{path}: no policy rows")
    try:
        c = np.array([[float(x) for x in r[1:]] for r in data[1:]])
        n_cache = float(meta["n_cache"])
    except ValueError as err:
        raise FormatError(f"{path}: {err}") from None
    if c.shape[1] != len(data[0]) - 1:
        raise FormatError(f"{path}: ragged policy grid")
    return CachingPolicy(c, n_cache).validate(), meta.get("config_hash", "")


TRACE_COLUMNS = ["iteration", "objective", "step_norm", "max_violation"]


def write_trace(path, trace: SolverTrace) -> Path:
    return write_rows(path, trace.rows(), TRACE_COLUMNS)


def versions() -> dict:
    return {
        "hetcache": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def write_manifest(out_dir, command: str, config, seed: int | None, outputs: list, status: str, extra: dict | None = None) -> Path:
    """Record what was run and on which inputs, so it can be repeated."""
    manifest = {
        "command": command,
        "config": config.to_dict() if config is not None else None,
        "config_hash": config.hash() if config is not None else None,
        "seed": seed,
        "outputs": [str(Path(p).name) for p in outputs],
        "status": status,
        "versions": versions(),
    }
    if extra:
        manifest.update(extra)
    return write_json(Path(out_dir) / f"manifest-{command}.json", manifest)
