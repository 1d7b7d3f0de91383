"""Command line experiment runner.

Subcommands cover the full pipeline: gen-data (synthetic corpus), train
(unrolled network from a solver initialization), eval (either solver on a
split), compare (solver vs trained network across iteration counts), and
grid (robustness of the comparison across threshold/step pairs).

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import (
    dataset_digest,
    generate_dataset,
    load_dataset,
    oversampled_measurements,
    save_dataset,
)
from .errors import FormatError, NumericError, TrainingDivergedError
from .network import svt_init
from .svt import SvtConfig, default_config
from .training import (
    TrainConfig,
    checkpoint_digest,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

DESK_SIZES = (5000, 1000, 1000)
PAPER_SIZES = (50000, 10000, 1000)
DEFAULT_GRID_PAIRS = "5:1,50:0.5,50:2.10,100:2.10,200:5,300:5"
DEFAULT_T_SWEEP = "2,3,4,5,6"


def version_string() -> str:
    """Package version, extended with the git description when available."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"lsvt-{__version__}+g{out.stdout.strip()}"
    except Exception:
        pass
    return f"lsvt-{__version__}"


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("LSVT_THREADS", "1"))


def _parse_sizes(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"--sizes wants three comma-separated ints, got {text!r}")
    sizes = tuple(int(p) for p in parts)
    if any(s < 1 for s in sizes):
        raise ValueError(f"split sizes must be positive, got {sizes}")
    return sizes


def _parse_pairs(text: str) -> list:
    pairs = []
    for chunk in text.split(","):
        tau, _, delta = chunk.partition(":")
        if not delta:
            raise ValueError(f"--pairs entries look like TAU:DELTA, got {chunk!r}")
        pairs.append((float(tau), float(delta)))
    return pairs


def _refuse_existing(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ValueError(f"{path} already exists; pass --force to overwrite")


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.6f}"


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    if (args.m is None) == (args.oversample is None):
        raise ValueError("pass exactly one of --m and --oversample")
    if args.paper_scale and args.sizes is not None:
        raise ValueError("--sizes and --paper-scale are mutually exclusive")
    m = args.m if args.m is not None else oversampled_measurements(args.d, args.r, args.oversample)
    if args.paper_scale:
        sizes = PAPER_SIZES
    else:
        sizes = _parse_sizes(args.sizes) if args.sizes is not None else DESK_SIZES
    out = Path(args.out)
    _refuse_existing(out, args.force)
    dataset = generate_dataset(
        args.d, args.r, m, master_seed=args.seed, sizes=sizes, threads=_threads(args)
    )
    save_dataset(dataset, out)
    print(
        f"wrote dataset {out} (d={args.d}, r={args.r}, m={m}, "
        f"sizes={sizes[0]}/{sizes[1]}/{sizes[2]}, seed={args.seed}, "
        f"digest={dataset_digest(out)[:12]})"
    )
    return 0


# ------------------------------------------------------------------- train


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        minibatch_size=args.minibatch,
        max_epochs=args.max_epochs,
        patience=args.patience,
        val_every=args.val_every,
        shuffle_seed=args.shuffle_seed,
    )


def _run_training(dataset, data_path, n_layers, tau, delta, config, threads, out, force):
    """Train from a solver initialization and persist checkpoint + history."""
    out = Path(out)
    _refuse_existing(out, force)
    theta0 = svt_init(dataset.operator, n_layers, tau=tau, delta=delta)
    try:
        theta, history = train(dataset, theta0, config, threads=threads)
    except TrainingDivergedError as e:
        if e.history is not None:
            out.mkdir(parents=True, exist_ok=True)
            e.history.write_csv(out / "history.csv")
        raise
    vals = [v for v in history.val_mse if v is not None]
    save_checkpoint(
        out,
        theta,
        step=history.steps[-1],
        best_val=min(vals),
        extra={
            "dataset": str(data_path),
            "dataset_digest": dataset_digest(data_path),
            "init": {"tau": float(theta0.tau[0]), "delta": float(theta0.delta[0])},
            "train_config": {
                "learning_rate": config.learning_rate,
                "minibatch_size": config.minibatch_size,
                "max_epochs": config.max_epochs,
                "patience": config.patience,
                "val_every": config.val_every,
                "shuffle_seed": config.shuffle_seed,
            },
            "version": version_string(),
        },
    )
    history.write_csv(out / "history.csv")
    return theta, history


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    _, history = _run_training(
        dataset,
        args.data,
        args.T,
        args.tau,
        args.delta,
        _train_config(args),
        _threads(args),
        args.out,
        args.force,
    )
    vals = [v for v in history.val_mse if v is not None]
    print(
        f"wrote checkpoint {args.out} (T={args.T}, steps={history.steps[-1]}, "
        f"best val mse {min(vals):.6g}, digest={checkpoint_digest(args.out)[:12]})"
    )
    return 0


# -------------------------------------------------------------------- eval


def _eval_report(result, dataset, args, solver_desc, extra_provenance):
    report = {
        "version": version_string(),
        "dataset": str(args.data),
        "dataset_digest": dataset_digest(args.data),
        "dataset_seed": dataset.meta["master_seed"],
        "split": args.split,
        "n_total": result.n_total,
        "n_diverged": result.n_diverged,
        "mean_frob_sq": result.mean_frob_sq,
        "mse_per_entry": result.mse_per_entry,
        "quantiles_frob_sq": result.quantiles(),
        **solver_desc,
        **extra_provenance,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out.with_suffix(".json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out.with_suffix(".csv"), "w") as fh:
        fh.write("index,frob_sq\n")
        for i, v in enumerate(result.per_instance):
            fh.write(f"{i},{'nan' if not np.isfinite(v) else repr(float(v))}\n")
    print(
        f"{report['solver']} on {args.split}: mse/entry {_fmt(result.mse_per_entry)} "
        f"(frob^2 {_fmt(result.mean_frob_sq)}, diverged {result.n_diverged}/{result.n_total})"
    )
    return report


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    split = dataset.split(args.split)
    if len(split) == 0:
        raise ValueError(f"split '{args.split}' is empty")
    d, m = dataset.meta["d"], dataset.meta["m"]
    if args.solver == "svt":
        if args.iters is None:
            raise ValueError("--solver svt requires --iters")
        base = default_config(d, m, args.iters)
        config = SvtConfig(
            tau=args.tau if args.tau is not None else base.tau,
            delta=args.delta if args.delta is not None else base.delta,
            iterations=args.iters,
        )
        result = evaluate(config, split, dataset.operator, threads=_threads(args))
        _eval_report(
            result,
            dataset,
            args,
            {
                "solver": "svt",
                "config": {"tau": config.tau, "delta": config.delta, "iterations": config.iterations},
            },
            {},
        )
    else:
        if args.checkpoint is None:
            raise ValueError("--solver lsvt requires --checkpoint")
        if any(v is not None for v in (args.iters, args.tau, args.delta)):
            raise ValueError("--iters/--tau/--delta apply to --solver svt only")
        theta, manifest = load_checkpoint(args.checkpoint)
        if theta.d != d or theta.m != m:
            raise ValueError(
                f"checkpoint dims (d={theta.d}, m={theta.m}) do not match dataset (d={d}, m={m})"
            )
        result = evaluate(theta, split, threads=_threads(args))
        _eval_report(
            result,
            dataset,
            args,
            {"solver": "lsvt", "config": {"num_layers": theta.num_layers}},
            {"checkpoint": str(args.checkpoint), "checkpoint_digest": checkpoint_digest(args.checkpoint)},
        )
    return 0


# ----------------------------------------------------------------- compare


def _ensure_checkpoint(dataset, data_path, ckpt_dir, n_layers, tau, delta, config, threads):
    """Reuse a cached checkpoint when it matches the dataset, else train."""
    ckpt_dir = Path(ckpt_dir)
    if (ckpt_dir / "manifest.json").exists():
        theta, manifest = load_checkpoint(ckpt_dir)
        if manifest.get("dataset_digest") == dataset_digest(data_path):
            return theta
    _run_training(
        dataset, data_path, n_layers, tau, delta, config, threads, ckpt_dir, force=True
    )
    theta, _ = load_checkpoint(ckpt_dir)
    return theta


def _write_table(path, header_rows, csv_header, csv_rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.with_suffix(".csv"), "w") as fh:
        fh.write(",".join(csv_header) + "\n")
        for row in csv_rows:
            fh.write(",".join(row) + "\n")
    with open(path.with_suffix(".txt"), "w") as fh:
        for line in header_rows:
            fh.write(line + "\n")


def cmd_compare(args) -> int:
    t_values = [int(t) for t in args.T_values.split(",")]
    if any(t < 1 for t in t_values):
        raise ValueError(f"iteration counts must be >= 1, got {t_values}")
    threads = _threads(args)
    config = _train_config(args)
    csv_rows = []
    text_by_rank = {}
    for data_path in args.data:
        dataset = load_dataset(data_path)
        d, r, m = (dataset.meta[k] for k in ("d", "r", "m"))
        test = dataset.split("test")
        cells = {}
        for T in t_values:
            svt_res = evaluate(default_config(d, m, T), test, dataset.operator, threads=threads)
            ckpt = Path(args.workdir) / f"ckpt_d{d}_r{r}_T{T}"
            theta = _ensure_checkpoint(
                dataset, data_path, ckpt, T, None, None, config, threads
            )
            lsvt_res = evaluate(theta, test, threads=threads)
            cells[T] = (svt_res, lsvt_res)
            csv_rows.append(
                [
                    str(d), str(r), str(m), str(T),
                    _fmt(svt_res.mse_per_entry), _fmt(lsvt_res.mse_per_entry),
                    _fmt(svt_res.mean_frob_sq), _fmt(lsvt_res.mean_frob_sq),
                    str(svt_res.n_diverged), str(lsvt_res.n_diverged),
                ]
            )
            print(
                f"d={d} r={r} T={T}: svt {_fmt(svt_res.mse_per_entry)} "
                f"lsvt {_fmt(lsvt_res.mse_per_entry)} (mse/entry)"
            )
        text_by_rank[(d, r, m)] = cells

    lines = ["MSE per entry on the test split, svt / lsvt", ""]
    for (d, r, m), cells in text_by_rank.items():
        lines.append(f"d={d} m={m} rank={r}")
        lines.append("  " + "".join(f"{'T=' + str(T):>20}" for T in t_values))
        row = "  "
        for T in t_values:
            svt_res, lsvt_res = cells[T]
            row += f"{_fmt(svt_res.mse_per_entry) + ' / ' + _fmt(lsvt_res.mse_per_entry):>20}"
        lines.append(row)
        lines.append("")
    _write_table(
        Path(args.out),
        lines,
        [
            "d", "r", "m", "T",
            "svt_mse_per_entry", "lsvt_mse_per_entry",
            "svt_mean_frob_sq", "lsvt_mean_frob_sq",
            "svt_diverged", "lsvt_diverged",
        ],
        csv_rows,
    )
    print(f"wrote {Path(args.out).with_suffix('.csv')} and .txt")
    return 0


# -------------------------------------------------------------------- grid


def cmd_grid(args) -> int:
    pairs = _parse_pairs(args.pairs)
    threads = _threads(args)
    config = _train_config(args)
    dataset = load_dataset(args.data)
    d, r, m = (dataset.meta[k] for k in ("d", "r", "m"))
    test = dataset.split("test")
    csv_rows = []
    lines = [f"Robustness over (tau, delta) at T={args.T}, d={d} r={r} m={m}", ""]
    lines.append(f"{'tau':>8} {'delta':>8} {'svt':>12} {'lsvt':>12} {'lsvt_better':>12}")
    for tau, delta in pairs:
        svt_res = evaluate(SvtConfig(tau, delta, args.T), test, dataset.operator, threads=threads)
        label = f"grid_tau{tau:g}_delta{delta:g}_T{args.T}".replace(".", "p")
        ckpt = Path(args.workdir) / label
        theta = _ensure_checkpoint(
            dataset, args.data, ckpt, args.T, tau, delta, config, threads
        )
        lsvt_res = evaluate(theta, test, threads=threads)
        better = lsvt_res.mse_per_entry < svt_res.mse_per_entry
        csv_rows.append(
            [
                f"{tau:g}", f"{delta:g}",
                _fmt(svt_res.mse_per_entry), _fmt(lsvt_res.mse_per_entry),
                str(svt_res.n_diverged), str(lsvt_res.n_diverged),
                str(bool(better)).lower(),
            ]
        )
        lines.append(
            f"{tau:>8g} {delta:>8g} {_fmt(svt_res.mse_per_entry):>12} "
            f"{_fmt(lsvt_res.mse_per_entry):>12} {str(bool(better)).lower():>12}"
        )
        print(
            f"tau={tau:g} delta={delta:g}: svt {_fmt(svt_res.mse_per_entry)} "
            f"(diverged {svt_res.n_diverged}) lsvt {_fmt(lsvt_res.mse_per_entry)} "
            f"better={str(bool(better)).lower()}"
        )
    _write_table(
        Path(args.out),
        lines,
        [
            "tau", "delta",
            "svt_mse_per_entry", "lsvt_mse_per_entry",
            "svt_diverged", "lsvt_diverged", "lsvt_better",
        ],
        csv_rows,
    )
    print(f"wrote {Path(args.out).with_suffix('.csv')} and .txt")
    return 0


# ------------------------------------------------------------------ parser


def _add_common(p):
    p.add_argument("--threads", type=int, default=None, help="worker pool size (env LSVT_THREADS, default 1)")


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=1e-4, help="ADAM learning rate")
    p.add_argument("--minibatch", type=int, default=1000, help="minibatch size")
    p.add_argument("--max-epochs", type=int, default=500, help="epoch cap")
    p.add_argument("--patience", type=int, default=200, help="updates without a new validation best before stopping")
    p.add_argument("--val-every", type=int, default=1, help="validate every k-th update")
    p.add_argument("--shuffle-seed", type=int, default=0, help="epoch shuffling seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lsvt",
        description="Singular value thresholding, classic and learned: data, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic low-rank dataset")
    p.add_argument("--d", type=int, required=True, help="matrix side length")
    p.add_argument("--r", type=int, required=True, help="ground-truth rank")
    p.add_argument("--m", type=int, default=None, help="measurement count")
    p.add_argument("--oversample", type=float, default=None, help="measurements as a multiple of the rank-r degrees of freedom")
    p.add_argument("--sizes", type=str, default=None, help="train,val,test sizes (default 5000,1000,1000)")
    p.add_argument("--paper-scale", action="store_true", help="use the full 50000,10000,1000 protocol")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", type=str, required=True, help="output dataset directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the unrolled network from a solver initialization")
    p.add_argument("--data", type=str, required=True, help="dataset directory")
    p.add_argument("--T", type=int, required=True, help="total layers (hidden + output); matches solver iterations")
    p.add_argument("--tau", type=float, default=None, help="initial threshold (default 5*d)")
    p.add_argument("--delta", type=float, default=None, help="initial dual step (default 1.2*d^2/m)")
    p.add_argument("--out", type=str, required=True, help="checkpoint directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a solver on a dataset split")
    p.add_argument("--data", type=str, required=True, help="dataset directory")
    p.add_argument("--solver", choices=("svt", "lsvt"), required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--iters", type=int, default=None, help="svt iteration count")
    p.add_argument("--tau", type=float, default=None, help="svt threshold override")
    p.add_argument("--delta", type=float, default=None, help="svt dual step override")
    p.add_argument("--checkpoint", type=str, default=None, help="lsvt checkpoint directory")
    p.add_argument("--out", type=str, required=True, help="report base path (writes .json and .csv)")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="solver vs trained network across iteration counts")
    p.add_argument("--data", type=str, action="append", required=True, help="dataset directory (repeat per rank)")
    p.add_argument("--T-values", type=str, default=DEFAULT_T_SWEEP, help="comma-separated iteration counts")
    p.add_argument("--workdir", type=str, required=True, help="checkpoint cache directory")
    p.add_argument("--out", type=str, required=True, help="table base path (writes .csv and .txt)")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("grid", help="robustness sweep over (tau, delta) initializations")
    p.add_argument("--data", type=str, required=True, help="dataset directory")
    p.add_argument("--pairs", type=str, default=DEFAULT_GRID_PAIRS, help="comma-separated TAU:DELTA pairs")
    p.add_argument("--T", type=int, default=4, help="total layers / solver iterations")
    p.add_argument("--workdir", type=str, required=True, help="checkpoint cache directory")
    p.add_argument("--out", type=str, required=True, help="table base path (writes .csv and .txt)")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NumericError, TrainingDivergedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (FormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
