import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from hetcache import cli
from hetcache.config import ConfigError, config_from_dict, load_config
from hetcache.experiments import SWEEP_COLUMNS
from hetcache.io import read_policy, read_rows


@pytest.fixture(autouse=True)
def table_cache(tmp_path_factory, monkeypatch):
    monkeypatch.setenv("HETCACHE_CACHE_DIR", str(tmp_path_factory.getbasetemp() / "tables"))


def run(*argv):
    return cli.main([str(a) for a in argv])


def small_config(tmp_path, **extra):
    cfg = {
        "n_users": 4,
        "n_files": 6,
        "n_cache": 1,
        "demand": {"source": "synthesize", "theta": 0.3, "delta_a": 1.0},
        "simulation": {"n_requests": 20000, "cdf_samples": 500},
        **extra,
    }
    path = tmp_path / "small.json"
    path.write_text(json.dumps(cfg))
    return path


def test_toy1_optimize(tmp_path, capsys):
    assert run("optimize", "--config", "toy1", "--out", tmp_path) == 0
    pol, h = read_policy(tmp_path / "policy.csv")
    assert np.allclose(pol.c[:, 0], [1, 0, 0], atol=1e-3)
    assert h == load_config("toy1").hash()
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed["network"] == pytest.approx(1.916e6)
    manifest = json.loads((tmp_path / "manifest-optimize.json").read_text())
    assert manifest["status"] == "ok" and "policy.csv" in manifest["outputs"]
    trace = read_rows(tmp_path / "trace.csv")
    assert list(trace[0]) == ["iteration", "objective", "step_norm", "max_violation"]


def test_toy1_fair_optimize(tmp_path):
    assert run("optimize", "--config", "toy1", "--eta", 1.0, "--out", tmp_path) == 0
    pol, _ = read_policy(tmp_path / "policy.csv")
    assert pol.c[2, 0] > 0.1


def test_toy_command(tmp_path, capsys):
    assert run("toy", "--name", "two-heterogeneous", "--eta", 0, "--out", tmp_path) == 0
    res = json.loads((tmp_path / "toy.json").read_text())
    assert np.allclose(res[0]["policy"], [[1, 0], [0, 0], [0, 1]], atol=1e-3)


def test_evaluate_rejects_zero_requests(tmp_path):
    assert run("optimize", "--config", "toy1", "--out", tmp_path) == 0
    assert run("evaluate", "--config", "toy1", "--policy", tmp_path / "policy.csv", "--requests", 0, "--out", tmp_path) == 2


def test_evaluate_closed_form_only_for_custom_table(tmp_path):
    run("optimize", "--config", "toy1", "--out", tmp_path)
    assert run("evaluate", "--config", "toy1", "--policy", tmp_path / "policy.csv", "--out", tmp_path) == 0
    summary = json.loads((tmp_path / "evaluate.json").read_text())
    assert summary["closed_form"]["network"] == pytest.approx(1.916e6)
    assert "simulated" not in summary


def test_optimize_then_evaluate_geometric(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "out"
    assert run("optimize", "--config", cfg, "--policy", "local_pop", "--out", out) == 0
    assert run("evaluate", "--config", cfg, "--policy", out / "policy.csv", "--out", out) == 0
    users = read_rows(out / "users.csv")
    assert len(users) == 4 and "closed_form_rate" in users[0]
    samples = read_rows(out / "samples.csv")
    assert len(samples) == 500
    summary = json.loads((out / "evaluate.json").read_text())
    assert summary["simulated"]["network"] == pytest.approx(summary["closed_form"]["network"], rel=0.05)


def test_synth_writes_demand(tmp_path):
    cfg = small_config(tmp_path)
    assert run("synth", "--config", cfg, "--seed", 3, "--out", tmp_path / "o") == 0
    d = json.loads((tmp_path / "o" / "demand.json").read_text())
    Q, v, p = np.array(d["Q"]), np.array(d["v"]), np.array(d["p"])
    assert np.abs(v @ Q - p).max() <= 1e-9


def test_ingest_sample_log(tmp_path):
    log = tmp_path / "log.tsv"
    log.write_text("alice\tx\t3\nalice\ty\t1\nbob\tx\t1\nbob\ty\t3\n")
    assert run("ingest", "--log", log, "--out", tmp_path) == 0
    d = json.loads((tmp_path / "demand.json").read_text())
    assert np.allclose(d["v"], [0.5, 0.5])
    report = json.loads((tmp_path / "mzipf.json").read_text())
    assert report["popularity"]["fitted"] is False


def test_ingest_malformed_log(tmp_path):
    log = tmp_path / "bad.tsv"
    log.write_text("alice\tx\n")
    assert run("ingest", "--log", log, "--out", tmp_path) == 2


def test_sweep_schema(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "sw"
    assert run("sweep", "--config", cfg, "--axis", "eta", "--grid", "0,1", "--policies", "policy1,local_pop",
               "--seeds", 1, "--out", out) == 0
    text = (out / "sweep-eta.csv").read_text().splitlines()
    # golden header: downstream plotting depends on this exact schema
    assert text[0] == "axis,value,seed,policy,network,min,min_user,opt_network,opt_min,iterations,final_step,converged,monotone,status,error"
    assert text[0] == ",".join(SWEEP_COLUMNS)
    rows = read_rows(out / "sweep-eta.csv")
    assert len(rows) == 4
    assert {r["policy"] for r in rows} == {"policy1", "local_pop"}
    assert all(r["status"] == "ok" for r in rows)


def test_sweep_bad_grid(tmp_path):
    assert run("sweep", "--config", small_config(tmp_path), "--axis", "eta", "--grid", "a,b", "--out", tmp_path) == 2


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_users": 0}))
    assert run("optimize", "--config", bad, "--out", tmp_path) == 2
    assert run("optimize", "--config", tmp_path / "missing.json", "--out", tmp_path) == 2


@pytest.mark.parametrize("d,msg", [
    ({"eta": 2.0}, "eta"),
    ({"colour": 1}, "unknown"),
    ({"demand": {"source": "oracle"}}, "source"),
    ({"demand": {"source": "file", "path": "nope.json"}}, "does not exist"),
    ({"K": 9}, "K"),
    ({"metric": "latency"}, "metric"),
    ({"solver": {"tol": 0}}, "tol"),
])
def test_config_validation(d, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(d)


def test_config_hash_stable():
    a = load_config("desk")
    b = load_config("desk")
    assert a.hash() == b.hash()
    assert a.replace(eta=0.5).hash() != a.hash()


def test_console_script(tmp_path):
    exe = shutil.which("hetcache")
    cmd = [exe] if exe else [sys.executable, "-m", "hetcache.cli"]
    res = subprocess.run(cmd + ["toy", "--name", "single-heterogeneous", "--eta", "0"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "network=1.9160" in res.stdout
