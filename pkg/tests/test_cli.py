import json
import multiprocessing as mp
import os
import subprocess
import sys
import time

import numpy as np
import pytest
import yaml
from hypothesis import given, strategies as st

from quenched_lsv import cli
from quenched_lsv.base import ConfigError
from quenched_lsv.config import config_from_dict, load_config
from quenched_lsv.grid import GridFunction, make_grid

SMALL = {"grid": {"N": 256}, "knobs": {"depth": 200, "n_max": 32, "omega_count": 8}}


def _cfg(tmp_path, **over):
    d = {"kind": "density", **SMALL}
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    path = tmp_path / f"cfg_{abs(hash(json.dumps(d, sort_keys=True)))}.yaml"
    path.write_text(yaml.safe_dump(d))
    return path


def test_density_of_doubling_map_is_one(tmp_path):
    p = _cfg(tmp_path, params={"beta_expr": "0", "delta_expr": "0", "alpha_lower": 0.0, "alpha_upper": 0.0,
                               "boundary": True}, knobs={"depth": 30})
    out = tmp_path / "out"
    assert cli.main(["run", str(p), "--out", str(out)]) == 0
    h = GridFunction.from_bytes((out / "density.gfn").read_bytes())
    assert np.abs(h.values - 1).max() < 1e-13
    man = json.loads((out / "manifest.json").read_text())
    assert set(man) >= {"config_hash", "version", "seed", "wall_clock_s", "checksums"}


def test_zero_observable_clt_is_unit_mass(tmp_path):
    p = _cfg(tmp_path, kind="clt", observable={"family": "constant", "F": "zero"},
             knobs={"n": 100, "trials": 200, "anchors": 2})
    out = tmp_path / "out"
    assert cli.main(["run", str(p), "--out", str(out)]) == 0
    res = json.loads((out / "result.json").read_text())
    assert res["verdict"] == "pass(unit-mass)"
    rows = (out / "clt_samples.csv").read_text().splitlines()
    assert rows[0] == "anchor,trial,sum" and len(rows) == 401


def test_repeat_runs_are_byte_identical(tmp_path):
    p = _cfg(tmp_path, kind="variance", params={"eps0": 0.02, "beta_expr": "0.2+0.05*sin(2*pi*w)", "alpha_lower": 0.12},
             knobs={"eps_grid": [-0.02, 0.0, 0.02]})
    m = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        assert cli.main(["run", str(p), "--out", str(out), "--seed", "7"]) == 0
        m.append(json.loads((out / "manifest.json").read_text()))
    assert m[0]["checksums"] == m[1]["checksums"] and m[0]["config_hash"] == m[1]["config_hash"]
    assert (tmp_path / "o0" / "variance_curve.csv").read_bytes() == (tmp_path / "o1" / "variance_curve.csv").read_bytes()


def test_seed_override_changes_hash(tmp_path):
    p = _cfg(tmp_path)
    a = load_config(p)
    from dataclasses import replace
    assert replace(a, seed=3).hash() != a.hash()
    assert replace(a, out_dir="elsewhere").hash() == a.hash()


@pytest.mark.parametrize("raw", [
    {"kind": "nope"},
    {"kind": "density", "extra": 1},
    {"kind": "density", "grid": {"N": 256, "q": 2}},
    {"kind": "clt", "params": {"beta_expr": "0.5+0.05*sin(2*pi*w)", "alpha_lower": 0.4, "alpha_upper": 0.6}},
    {"kind": "diffvar"},
    {"kind": "special", "params": {"beta_expr": "0.12", "alpha_lower": 0.1, "alpha_upper": 0.15}},
    {"kind": "density", "params": {"beta_expr": "0.2", "alpha_lower": 0.25, "alpha_upper": 0.3}},
    {"kind": "response", "params": {"eps0": 0.01}, "knobs": {"eps_grid": [0.1]}},
])
def test_validation_errors_exit_2(tmp_path, raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump(raw))
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_case_two_gate_accepts_special_observable():
    raw = {"kind": "clt", "params": {"beta_expr": "0.5+0.05*sin(2*pi*w)", "alpha_lower": 0.4, "alpha_upper": 0.6},
           "observable": {"family": "special", "gamma_obs": 0.3, "g": "identity"}}
    assert config_from_dict(raw).kind == "clt"
    raw["observable"]["gamma_obs"] = 0.15
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_hard_failure_exits_1(tmp_path, monkeypatch):
    p = _cfg(tmp_path)

    def boom(ctx):
        raise ArithmeticError("pullback mass drift")
    monkeypatch.setitem(cli.RUNNERS, "density", boom)
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 1
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["verdict"] == "error"


def _producer(calls):
    def produce():
        calls.append(1)
        time.sleep(0.05)
        return GridFunction(make_grid(16, 2), np.arange(16.0))
    return produce


def test_cache_cold_then_warm(tmp_path):
    calls = []
    a, s1 = cli.cache_lookup_or_compute("k", _producer(calls), str(tmp_path))
    b, s2 = cli.cache_lookup_or_compute("k", _producer(calls), str(tmp_path))
    assert (s1, s2) == ("computed", "hit") and len(calls) == 1
    assert np.array_equal(a.values, b.values)


def test_corrupted_entry_is_recomputed(tmp_path):
    calls = []
    a, _ = cli.cache_lookup_or_compute("k", _producer(calls), str(tmp_path))
    (entry,) = tmp_path.glob("gf_*.gfn")
    entry.write_bytes(b"GFN1\x00\x01")
    b, status = cli.cache_lookup_or_compute("k", _producer(calls), str(tmp_path))
    assert status == "computed" and len(calls) == 2 and np.array_equal(a.values, b.values)
    assert GridFunction.from_bytes(entry.read_bytes()).grid.N == 16


def test_unwritable_cache_warns_and_proceeds(tmp_path, caplog):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    calls = []
    v, status = cli.cache_lookup_or_compute("k", _producer(calls), str(blocker / "sub"))
    assert status == "uncached" and len(calls) == 1
    assert any("uncached" in r.message or "unusable" in r.message for r in caplog.records)


def _worker(directory, barrier, q):
    barrier.wait()
    calls = []
    _, status = cli.cache_lookup_or_compute("shared", _producer(calls), directory)
    q.put((status, len(calls)))


def test_concurrent_runs_compute_once(tmp_path):
    ctx = mp.get_context("fork")
    barrier, q = ctx.Barrier(2), ctx.Queue()
    procs = [ctx.Process(target=_worker, args=(str(tmp_path), barrier, q)) for _ in range(2)]
    for p in procs:
        p.start()
    for p in procs:
        p.join(30)
    res = sorted(q.get(timeout=5) for _ in procs)
    assert [r[0] for r in res] == ["computed", "hit"] and sum(r[1] for r in res) == 1


def test_console_entry_point(tmp_path):
    p = _cfg(tmp_path, params={"beta_expr": "0", "delta_expr": "0", "alpha_lower": 0.0, "alpha_upper": 0.0,
                               "boundary": True}, knobs={"depth": 5})
    env = {**os.environ, "QLSV_THREADS": "1"}
    r = subprocess.run([sys.executable, "-m", "quenched_lsv.cli", "run", str(p), "--out", str(tmp_path / "o")],
                       env=env, capture_output=True, text=True, timeout=120)
    assert r.returncode == 0, r.stderr


@given(st.dictionaries(st.sampled_from(["n", "trials", "n_max", "K", "omega_count"]), st.integers(-5, 0),
                       min_size=1))
def test_nonpositive_knobs_rejected(knobs):
    with pytest.raises(ConfigError):
        config_from_dict({"kind": "density", "knobs": knobs})
