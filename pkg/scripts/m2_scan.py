#!/usr/bin/env python3
"""Design-convergence scan: |mean M2 - Haar M2| versus number of quenches.

    python3 scripts/m2_scan.py [--preset fiducial] [--instances 200] [--out-dir runs/m2_scan]
"""

import argparse
import sys

from rydberg_otoc.cli import main


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--preset", default="fiducial")
    ap.add_argument("--instances", type=int, default=200)
    ap.add_argument("--atoms", type=int, default=5)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out-dir", default="runs/m2_scan")
    args = ap.parse_args(argv)
    cli = ["m2-scan", args.preset, "--instances", str(args.instances), "--atoms", str(args.atoms),
           "--out-dir", args.out_dir]
    if args.seed is not None:
        cli += ["--seed", str(args.seed)]
    rc = main(cli)
    if rc == 0:
        print(open(f"{args.out_dir}/m2_scan.csv").read(), end="")
    return rc


if __name__ == "__main__":
    sys.exit(run())
