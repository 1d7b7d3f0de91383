#!/usr/bin/env python3
"""Reproduce the solver-vs-trained-network MSE tables.

Generates one dataset per (d, rank) configuration, trains the unrolled
network for every iteration count, and renders the comparison tables (CSV
and text, per-entry MSE units).  Desk scale (5000/1000/1000 splits) finishes
on a workstation; --scale paper switches to the full 50000/10000/1000
protocol and is a long-running job.

Measurement counts follow the benchmark protocol: oversampling ratio 3 for
the smallest rank per dimension (d=10 r=1 -> m=57, d=20 r=2 -> m=228) and a
fixed budget otherwise (m=90 for d=10, m=350 for d=20).
"""

import argparse
import sys
from pathlib import Path

from lsvt.cli import main as lsvt_main

CONFIGS = {
    10: [(1, "--oversample", "3"), (2, "--m", "90"), (3, "--m", "90")],
    20: [(2, "--oversample", "3"), (4, "--m", "350"), (6, "--m", "350")],
}


def run(argv):
    rc = lsvt_main(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--outdir", required=True, help="working directory for datasets, checkpoints, tables")
    parser.add_argument("--dims", choices=("10", "20", "both"), default="10")
    parser.add_argument("--scale", choices=("desk", "paper"), default="desk")
    parser.add_argument("--t-values", default="2,3,4,5,6")
    parser.add_argument("--lr", default="1e-4", help="learning rate for every cell (the full protocol drops to 1e-5 for d=20, T>=5)")
    parser.add_argument("--max-epochs", default=None)
    parser.add_argument("--seed", default="0")
    parser.add_argument("--threads", default=None)
    args = parser.parse_args()

    out = Path(args.outdir)
    dims = (10, 20) if args.dims == "both" else (int(args.dims),)
    common = []
    if args.threads:
        common += ["--threads", args.threads]

    for d in dims:
        data_args = []
        for r, m_flag, m_val in CONFIGS[d]:
            data = out / f"data_d{d}_r{r}"
            if not (data / "manifest.json").exists():
                gen = [
                    "gen-data", "--d", str(d), "--r", str(r), m_flag, m_val,
                    "--seed", args.seed, "--out", str(data),
                ] + common
                if args.scale == "paper":
                    gen.append("--paper-scale")
                run(gen)
            data_args += ["--data", str(data)]
        cmp_args = [
            "compare", *data_args, "--T-values", args.t_values,
            "--workdir", str(out / f"checkpoints_d{d}"),
            "--out", str(out / f"table_d{d}"), "--lr", args.lr,
        ] + common
        if args.max_epochs:
            cmp_args += ["--max-epochs", args.max_epochs]
        run(cmp_args)
        print(f"\n{(out / f'table_d{d}.txt').read_text()}")


if __name__ == "__main__":
    main()
