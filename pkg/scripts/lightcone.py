#!/usr/bin/env python3
"""Randomized-protocol run, exact oracle and lightcone comparison for one preset.

Writes otoc_series.csv, oracle_series.csv, heatmap.csv, lightcone_fit.json and
compare_report.json under the output directory.

    python3 scripts/lightcone.py [--preset fiducial] [--shots 0] [--out-dir runs/lightcone]
"""

import argparse
import json
import sys
from pathlib import Path

from rydberg_otoc.cli import main


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--preset", default="fiducial")
    ap.add_argument("--shots", type=int, default=0, help="0 = exact expectations")
    ap.add_argument("--instances", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out-dir", default="runs/lightcone")
    args = ap.parse_args(argv)
    out = Path(args.out_dir)
    common = ["--out-dir", str(out)] + (["--seed", str(args.seed)] if args.seed is not None else [])
    run_args = ["run-otoc", args.preset, "--shots", str(args.shots), "--quiet"] + common
    if args.instances:
        run_args += ["--instances", str(args.instances)]
    for argv_ in (run_args, ["oracle", args.preset] + common):
        if (rc := main(argv_)) != 0:
            return rc
    sim, orc = str(out / "otoc_series.csv"), str(out / "oracle_series.csv")
    if (rc := main(["analyze", "--fit", sim, "--out-dir", str(out)])) != 0:
        return rc
    fit = json.loads((out / "lightcone_fit.json").read_text())
    if (rc := main(["analyze", "--compare", sim, orc, "--out-dir", str(out)])) != 0:
        return rc
    print(f"simulated slope {fit['slope']:.4f} +- {fit['slope_err']:.4f} us/site")
    return 0


if __name__ == "__main__":
    sys.exit(run())
