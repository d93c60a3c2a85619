"""Command-line runner: ``quenched-lsv run <config> [--seed S] [--out DIR] [--cache DIR]``.

Exit status: 0 for completed runs (whatever the verdict), 1 for hard numeric
failures, 2 for invalid configurations.
"""

from __future__ import annotations

import os

# thread caps must be in place before numpy loads its BLAS
_THREADS = os.environ.get("QLSV_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from dataclasses import replace
from typing import Callable, Optional

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .base import ConfigError
from .config import ExperimentConfig, load_config
from .grid import GridFunction, Tag, make_grid
from .lsv import ConvergenceError, SingularityError
from .transfer import DegenerateDensityError, OperatorCache

log = logging.getLogger("quenched_lsv")

VERDICTS = ("pass", "fail", "inconclusive")
CACHE_LOCK_TIMEOUT = 3600.0


# --------------------------------------------------------------------------
# atomic output and the GridFunction cache


def atomic_write(path: str, data: bytes) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.{os.getpid()}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def cache_lookup_or_compute(key: str, producer: Callable[[], GridFunction],
                            directory: Optional[str]) -> tuple:
    """Get-or-insert a GridFunction under ``key``; returns (value, status).

    status is "hit", "computed" or "uncached".  Entries with a bad magic or
    length are recomputed and overwritten.  Concurrent callers serialise on a
    lock file, so only the first computes.
    """
    if not directory:
        return producer(), "uncached"
    name = hashlib.sha256(key.encode()).hexdigest()[:32]
    path = os.path.join(directory, f"gf_{name}.gfn")
    try:
        os.makedirs(directory, exist_ok=True)
        lock = FileLock(path + ".lock", timeout=CACHE_LOCK_TIMEOUT)
        lock.acquire()
    except (OSError, Timeout) as exc:
        log.warning("cache directory %s unusable (%s); running uncached", directory, exc)
        return producer(), "uncached"
    try:
        hit = _read_entry(path)
        if hit is not None:
            return hit, "hit"
        value = producer()
        try:
            atomic_write(path, value.to_bytes())
        except OSError as exc:
            log.warning("could not write cache entry %s (%s)", path, exc)
            return value, "uncached"
        return value, "computed"
    finally:
        lock.release()


def _read_entry(path: str) -> Optional[GridFunction]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        return None
    try:
        return GridFunction.from_bytes(data)
    except ValueError:
        log.warning("corrupted cache entry %s; recomputing", path)
        return None


# --------------------------------------------------------------------------
# serialisation


def _num(x):
    x = float(x)
    return None if not math.isfinite(x) else x


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue().encode()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return obj


def json_bytes(obj) -> bytes:
    return (json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


# --------------------------------------------------------------------------
# experiment kinds; each returns ({file name: bytes}, summary dict with "verdict")


class Context:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.base = cfg.make_base()
        self.params = cfg.make_params()
        self.obs = cfg.make_observable()
        self.grid = make_grid(cfg.grid.N, cfg.grid.p)
        self.cache = OperatorCache()
        self.k = cfg.knobs

    def omegas(self, count):
        return self.base.sample_omegas(count, self.cfg.seed)

    def density(self, omega, eps=0.0):
        from .transfer import equivariant_density
        c = self.cfg
        key = json.dumps({"what": "density", "base": c.to_dict()["base"], "params": c.to_dict()["params"],
                          "grid": [c.grid.N, c.grid.p], "omega": [omega.origin, omega.shift],
                          "eps": eps, "depth": self.k.depth}, sort_keys=True)

        def produce():
            return equivariant_density(self.base, self.params, omega, self.k.depth, eps, self.grid,
                                       self.cache, boundary=self.params.boundary).h
        h, status = cache_lookup_or_compute(key, produce, c.cache_dir)
        log.info("density cache: %s", status)
        return h

    def phi(self, omega, h):
        from .stats import Family, build_special_observable
        if self.obs.family is Family.SPECIAL:
            return build_special_observable(self.obs.u, self.obs.g, h)
        return self.obs.F


def run_density(ctx: Context):
    omega = ctx.omegas(1)[0]
    h = ctx.density(omega)
    g = ctx.grid
    rows = zip(range(g.N), g.nodes[:-1], g.nodes[1:], h.values)
    files = {"density.csv": csv_bytes(["cell", "left", "right", "value"], rows), "density.gfn": h.to_bytes()}
    summary = {"verdict": "pass", "min": float(h.values.min()), "max": float(h.values.max()),
               "omega": str(omega)}
    return files, summary


def run_cones(ctx: Context):
    from .transfer import ConeParams, cone_check
    k = ctx.k
    cone = ConeParams()
    a = k.cone_a if k.cone_a is not None else cone.a
    b1 = k.cone_b1 if k.cone_b1 is not None else cone.b1
    b2 = k.cone_b2 if k.cone_b2 is not None else cone.b2
    rows, ok = [], True
    for j, om in enumerate(ctx.omegas(k.omega_count)):
        h = ctx.density(om)
        rep = cone_check(h, a, ctx.params.alpha, b1, b2)
        ok &= rep.member
        rows.append([j, str(om), int(rep.member)] + [float(v) for v in rep.margins.values()])
    header = ["anchor", "omega", "member"] + [f"margin_{n}" for n in rep.margins]
    return {"cone_report.csv": csv_bytes(header, rows)}, {"verdict": "pass" if ok else "fail",
                                                          "a": a, "b1": b1, "b2": b2}


def run_decay(ctx: Context):
    from .response import fast_decay_check, singular_test_function
    from .transfer import decay_envelope, decay_profile
    k = ctx.k
    omega = ctx.omegas(1)[0]
    h = ctx.density(omega)
    prof = decay_profile(ctx.base, ctx.params, omega, ctx.phi(omega, h), h, k.n_max, cache=ctx.cache,
                         fit_lo=k.fit_lo)
    bound = decay_envelope(ctx.params.alpha, ctx.obs.decay_gamma) + k.slack
    ok = bool(prof.slope <= bound)
    files = {"decay_profile.csv": csv_bytes(["n", "norm"], prof.rows())}
    summary = {"slope": prof.slope, "slope_stderr": prof.slope_stderr, "bound": bound}
    if k.fast_gamma is not None:
        psi = singular_test_function(ctx.grid, k.fast_gamma)
        fd = fast_decay_check(ctx.base, ctx.params, psi, omega, k.n_max, k.fast_gamma, cache=ctx.cache,
                              fit_lo=k.fit_lo)
        files["fast_decay.csv"] = csv_bytes(["n", "norm"], zip(fd.n.tolist(), fd.norms.tolist()))
        summary.update(fast_slope=fd.slope, fast_bound=fd.bound)
        ok &= fd.passed
    if not np.isfinite(prof.slope):
        summary["verdict"] = "inconclusive"
    else:
        summary["verdict"] = "pass" if ok else "fail"
    return files, summary


def run_entrytime(ctx: Context):
    from .grid import lebesgue
    from .transfer import entry_time_tail
    k = ctx.k
    omega = ctx.omegas(1)[0]
    res = entry_time_tail(ctx.base, ctx.params, omega, lebesgue(ctx.grid), k.n_max, k.trials, ctx.cfg.seed,
                          fit_lo=k.fit_lo, boundary=ctx.params.boundary)
    bound = -1.0 / ctx.params.alpha + k.slack
    verdict = "inconclusive" if not np.isfinite(res.exponent) else ("pass" if res.exponent <= bound else "fail")
    return ({"entry_tail.csv": csv_bytes(["n", "tail"], zip(res.n.tolist(), res.tail.tolist()))},
            {"verdict": verdict, "exponent": res.exponent, "exponent_stderr": res.exponent_stderr,
             "bound": bound})


def run_clt(ctx: Context):
    from .stats import birkhoff_clt, green_kubo_variance
    k = ctx.k
    var = green_kubo_variance(ctx.base, ctx.params, ctx.obs, 0.0, k.n_max, k.omega_count, ctx.cfg.seed,
                              ctx.grid, ctx.cache, k.depth)
    rows, reports = [], []
    # anchors come from a seed stream disjoint from the variance fibres
    for j, om in enumerate(ctx.base.sample_omegas(k.anchors, ctx.cfg.seed + 1)):
        rep = birkhoff_clt(ctx.base, ctx.params, ctx.obs, om, k.n, k.trials, seed=ctx.cfg.seed + j,
                           grid=ctx.grid, cache=ctx.cache, depth=k.depth, variance=var,
                           strict=False)
        reports.append(rep)
        rows.extend((j, t, s) for t, s in rep.rows())
    need = k.min_pass if k.min_pass is not None else max(1, k.anchors - 1)
    passed = sum(r.passed for r in reports)
    degenerate = all(r.degenerate for r in reports)
    verdict = "pass" if passed >= need else "fail"
    if degenerate:
        verdict += "(unit-mass)"
    summary = {"verdict": verdict, "sigma2": var.sigma2, "tail_bound": var.tail_bound,
               "mc_stderr": var.mc_stderr, "anchors_passed": passed, "anchors": k.anchors,
               "ks": [r.ks_stat for r in reports], "ks_critical": reports[0].ks_critical}
    return {"clt_samples.csv": csv_bytes(["anchor", "trial", "sum"], rows)}, summary


def _variance_rows(ests):
    return [(e.eps, e.sigma2, e.tail_bound, e.mc_stderr) for e in ests]


VARIANCE_HEADER = ["eps", "sigma2", "tail_bound", "mc_stderr"]


def run_variance(ctx: Context):
    from .stats import green_kubo_variance
    k = ctx.k
    ests = [green_kubo_variance(ctx.base, ctx.params, ctx.obs, float(e), k.n_max, k.omega_count, ctx.cfg.seed,
                                ctx.grid, ctx.cache, k.depth) for e in k.eps_grid]
    # a budget comparable to the estimate itself means the number says little
    verdict = "pass" if all(e.budget < max(abs(e.sigma2), 1e-12) for e in ests) or \
        all(e.sigma2 == 0 for e in ests) else "inconclusive"
    return ({"variance_curve.csv": csv_bytes(VARIANCE_HEADER, _variance_rows(ests))},
            {"verdict": verdict, "sigma2": [e.sigma2 for e in ests]})


def run_continuity(ctx: Context):
    from .stats import variance_continuity_experiment
    k = ctx.k
    rep = variance_continuity_experiment(ctx.base, ctx.params, ctx.obs, k.eps_grid, k.n_max, k.omega_count,
                                         ctx.cfg.seed, ctx.grid, ctx.cache, k.depth)
    ok = rep.monotone and rep.within_modulus
    return ({"variance_curve.csv": csv_bytes(VARIANCE_HEADER, _variance_rows(rep.estimates))},
            {"verdict": "pass" if ok else "fail", "magnitudes": rep.magnitudes,
             "deviation": rep.magnitude_deviation, "budget": rep.magnitude_budget, "monotone": rep.monotone,
             "strictly_decreasing": rep.strictly_decreasing, "within_modulus": rep.within_modulus,
             "modulus_slope": rep.modulus_slope})


def run_response(ctx: Context):
    from .response import response_validate
    k = ctx.k
    omega = ctx.omegas(1)[0]
    val = response_validate(ctx.base, ctx.params, omega, [e for e in k.eps_grid if e != 0], k.K, ctx.grid,
                            ctx.cache, k.depth, k.tolerance)
    rows = zip(val.eps.tolist(), val.residuals.tolist(), val.distances.tolist())
    return ({"response_curve.csv": csv_bytes(["eps", "residual", "distance"], rows)},
            {"verdict": val.verdict, "slope": val.slope, "slope_stderr": val.slope_stderr,
             "stability_slope": val.stability_slope, "floor": val.floor, "theory_slope": val.theory_slope,
             "hhat_norm": val.series.norm})


def run_diffvar(ctx: Context):
    from .response import variance_derivative
    k = ctx.k
    rep = variance_derivative(ctx.base, ctx.params, ctx.obs, k.K, k.n_max, None, k.omega_count, ctx.cfg.seed,
                              ctx.grid, ctx.cache, k.depth, strict=False)
    return {"derivative_report.json": json_bytes(rep.to_dict())}, {"verdict": rep.verdict}


RUNNERS = {"density": run_density, "cones": run_cones, "decay": run_decay, "entrytime": run_entrytime,
           "clt": run_clt, "variance": run_variance, "continuity": run_continuity, "response": run_response,
           "diffvar": run_diffvar, "special": run_diffvar}


# --------------------------------------------------------------------------


HARD_FAILURES = (ArithmeticError, FloatingPointError, ConvergenceError, SingularityError,
                 DegenerateDensityError, np.linalg.LinAlgError)


def run(cfg: ExperimentConfig) -> int:
    """Run one configured experiment, writing outputs and manifest.json into cfg.out_dir."""
    t0 = time.perf_counter()
    try:
        files, summary = RUNNERS[cfg.kind](Context(cfg))
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return 2
    except HARD_FAILURES as exc:
        log.error("numerical failure: %s", exc)
        _write_manifest(cfg, {}, {"verdict": "error", "error": str(exc)}, time.perf_counter() - t0)
        return 1
    summary["kind"] = cfg.kind
    files["result.json"] = json_bytes(summary)
    for name, data in sorted(files.items()):
        atomic_write(os.path.join(cfg.out_dir, name), data)
    _write_manifest(cfg, files, summary, time.perf_counter() - t0)
    log.info("%s: %s", cfg.kind, summary["verdict"])
    return 0


def _write_manifest(cfg, files, summary, wall):
    manifest = {
        "config_hash": cfg.hash(),
        "version": __version__,
        "seed": cfg.seed,
        "kind": cfg.kind,
        "verdict": summary.get("verdict"),
        "wall_clock_s": round(wall, 3),
        "checksums": {n: hashlib.sha256(d).hexdigest() for n, d in sorted(files.items())},
        "config": cfg.to_dict(),
    }
    atomic_write(os.path.join(cfg.out_dir, "manifest.json"), json_bytes(manifest))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="quenched-lsv", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    rp = sub.add_parser("run", help="run one experiment from a YAML config")
    rp.add_argument("config")
    rp.add_argument("--seed", type=int)
    rp.add_argument("--out")
    rp.add_argument("--cache")
    rp.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out:
        over["out_dir"] = args.out
    if args.cache:
        over["cache_dir"] = args.cache
    cfg = replace(cfg, **over)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
