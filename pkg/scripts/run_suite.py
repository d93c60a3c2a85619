#!/usr/bin/env python3
"""Run experiment configs through the CLI runner and tabulate verdicts.

    python scripts/run_suite.py                      # every config in scripts/configs
    python scripts/run_suite.py decay response       # selected ones
    python scripts/run_suite.py --out runs --seed 3
"""
import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from quenched_lsv.cli import run
from quenched_lsv.config import load_config

HERE = Path(__file__).resolve().parent


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", help="config stems (default: all)")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--cache", default=None)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args(argv)
    paths = sorted((HERE / "configs").glob("*.yaml"))
    if args.names:
        paths = [p for p in paths if p.stem in args.names]
    status = 0
    for p in paths:
        cfg = load_config(p)
        over = {"out_dir": os.path.join(args.out, p.stem)}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.cache:
            over["cache_dir"] = args.cache
        cfg = replace(cfg, **over)
        t = time.perf_counter()
        code = run(cfg)
        dt = time.perf_counter() - t
        verdict = "error"
        res = Path(cfg.out_dir) / "result.json"
        if code == 0 and res.exists():
            verdict = json.loads(res.read_text())["verdict"]
        print(f"{p.stem:18s} exit={code} verdict={verdict:20s} {dt:8.1f}s", flush=True)
        status = max(status, code)
    return status


if __name__ == "__main__":
    sys.exit(main())
