#!/usr/bin/env python3
"""Robustness of the trained network across (tau, delta) initializations.

Builds the d=20, rank-2, m=228 benchmark dataset and sweeps the six
(threshold, step) pairs, training the unrolled network from each pair's
solver initialization and comparing test MSE against the solver at the same
parameters.
"""

import argparse
import sys
from pathlib import Path

from lsvt.cli import DEFAULT_GRID_PAIRS, main as lsvt_main


def run(argv):
    rc = lsvt_main(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--outdir", required=True)
    parser.add_argument("--scale", choices=("desk", "paper"), default="desk")
    parser.add_argument("--pairs", default=DEFAULT_GRID_PAIRS)
    parser.add_argument("--T", default="4")
    parser.add_argument("--lr", default="1e-4")
    parser.add_argument("--max-epochs", default=None)
    parser.add_argument("--seed", default="0")
    parser.add_argument("--threads", default=None)
    args = parser.parse_args()

    out = Path(args.outdir)
    common = []
    if args.threads:
        common += ["--threads", args.threads]
    data = out / "data_d20_r2"
    if not (data / "manifest.json").exists():
        gen = [
            "gen-data", "--d", "20", "--r", "2", "--oversample", "3",
            "--seed", args.seed, "--out", str(data),
        ] + common
        if args.scale == "paper":
            gen.append("--paper-scale")
        run(gen)
    grid = [
        "grid", "--data", str(data), "--pairs", args.pairs, "--T", args.T,
        "--workdir", str(out / "checkpoints"), "--out", str(out / "grid"),
        "--lr", args.lr,
    ] + common
    if args.max_epochs:
        grid += ["--max-epochs", args.max_epochs]
    run(grid)
    print(f"\n{(out / 'grid.txt').read_text()}")


if __name__ == "__main__":
    main()
