"""Synthetic low-rank ground truth and the on-disk dataset container.

An instance is X = P @ Q with P (d, r) and Q (r, d) drawn iid Gaussian with
mean 0 and variance 2, measured as b = apply(op, X).  A dataset fixes one
operator and partitions independently drawn instances into train/val/test
splits; every random quantity derives from a single master seed through
``np.random.SeedSequence`` spawning, so generation is reproducible and can be
parallelized per instance.

On disk a dataset is a blob container (see blobio): operator_w plus
{split}_x / {split}_b blobs, with dims, seeds and the vectorization
convention recorded in the manifest.  ``load_dataset`` verifies checksums,
the operator's row orthonormality, and spot-checks 1% of instances against
the rank and measurement invariants.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import blobio
from .errors import FormatError
from .measurement import VEC_CONVENTION, MeasurementOperator, generate_operator

FORMAT_VERSION = "lsvt-dataset-v1"
FACTOR_VARIANCE = 2.0
SPLIT_NAMES = ("train", "val", "test")

# Fractions of each split re-verified by load_dataset.
SPOT_CHECK_FRACTION = 0.01
RANK_RTOL = 1e-9


def degrees_of_freedom(d: int, r: int) -> int:
    """Parameter count of a d-by-d matrix of rank r: r*(2d - r)."""
    if not 1 <= r <= d:
        raise ValueError(f"rank must be in [1, {d}], got {r}")
    return r * (2 * d - r)


def oversampled_measurements(d: int, r: int, ratio: float = 3.0) -> int:
    """Measurement count at a given oversampling ratio over the rank-r dof."""
    if ratio <= 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    return int(round(ratio * degrees_of_freedom(d, r)))


@dataclass(frozen=True)
class LowRankInstance:
    """One ground-truth matrix with its measurements."""

    X: np.ndarray
    b: np.ndarray
    r: int


@dataclass(frozen=True)
class Split:
    """A block of instances: X stacked (N, d, d), b stacked (N, m)."""

    X: np.ndarray
    b: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class Dataset:
    operator: MeasurementOperator
    train: Split
    val: Split
    test: Split
    meta: dict

    def split(self, name: str) -> Split:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split '{name}', expected one of {SPLIT_NAMES}")
        return getattr(self, name)


def generate_instance(op: MeasurementOperator, r: int, seed) -> LowRankInstance:
    """Draw one rank-r instance; deterministic in ``seed``."""
    if not 1 <= r <= op.d:
        raise ValueError(f"rank must be in [1, {op.d}], got {r}")
    rng = np.random.default_rng(seed)
    std = np.sqrt(FACTOR_VARIANCE)
    P = rng.normal(0.0, std, (op.d, r))
    Q = rng.normal(0.0, std, (r, op.d))
    X = P @ Q
    return LowRankInstance(X=X, b=op.apply(X), r=r)


def _generate_split(op, r, seed_seq, n, threads) -> Split:
    children = seed_seq.spawn(n)

    def block(lo, hi):
        return [generate_instance(op, r, children[i]) for i in range(lo, hi)]

    if threads <= 1 or n < 2 * threads:
        instances = block(0, n)
    else:
        bounds = np.linspace(0, n, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(lambda ab: block(*ab), zip(bounds[:-1], bounds[1:]))
        instances = [inst for part in parts for inst in part]
    X = np.stack([inst.X for inst in instances]) if n else np.zeros((0, op.d, op.d))
    b = np.stack([inst.b for inst in instances]) if n else np.zeros((0, op.m))
    return Split(X=X, b=b)


def generate_dataset(
    d: int,
    r: int,
    m: int,
    master_seed: int,
    sizes: tuple = (50000, 10000, 1000),
    threads: int = 1,
) -> Dataset:
    """Generate operator and splits from one master seed.

    ``sizes`` is (train, val, test); the defaults match the full evaluation
    protocol, pass smaller values for desk-scale work.  The result is
    bit-identical for a given (d, r, m, master_seed, sizes) regardless of
    ``threads``.
    """
    if len(sizes) != 3 or any(s < 0 for s in sizes):
        raise ValueError(f"sizes must be three nonnegative ints, got {sizes}")
    root = np.random.SeedSequence(master_seed)
    op_seq, train_seq, val_seq, test_seq = root.spawn(4)
    op = generate_operator(d, m, op_seq)
    splits = [
        _generate_split(op, r, seq, n, threads)
        for seq, n in zip((train_seq, val_seq, test_seq), sizes)
    ]
    meta = {
        "d": d,
        "r": r,
        "m": m,
        "master_seed": master_seed,
        "sizes": list(sizes),
        "factor_variance": FACTOR_VARIANCE,
    }
    return Dataset(operator=op, train=splits[0], val=splits[1], test=splits[2], meta=meta)


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset container; see the module docstring for the layout."""
    arrays = {"operator_w": dataset.operator.W}
    for name in SPLIT_NAMES:
        sp = dataset.split(name)
        arrays[f"{name}_x"] = sp.X
        arrays[f"{name}_b"] = sp.b
    manifest = {
        "format": FORMAT_VERSION,
        "vec_convention": VEC_CONVENTION,
        **dataset.meta,
    }
    blobio.write_container(path, manifest, arrays)


def load_dataset(path, verify: bool = True) -> Dataset:
    """Read a dataset container back, verifying integrity and invariants."""
    manifest = blobio.read_manifest(path)
    if manifest.get("format") != FORMAT_VERSION:
        raise FormatError(f"unrecognized dataset format {manifest.get('format')!r}")
    d, r, m = manifest["d"], manifest["r"], manifest["m"]
    W = blobio.load_blob(path, manifest, "operator_w")
    op = MeasurementOperator(W=W, d=d)
    splits = {}
    for name in SPLIT_NAMES:
        X = blobio.load_blob(path, manifest, f"{name}_x")
        b = blobio.load_blob(path, manifest, f"{name}_b")
        if X.shape[1:] != (d, d) or b.shape[1:] != (m,) or X.shape[0] != b.shape[0]:
            raise FormatError(f"inconsistent shapes in split '{name}'")
        splits[name] = Split(X=X, b=b)
    meta = {k: manifest[k] for k in ("d", "r", "m", "master_seed", "sizes", "factor_variance")}
    dataset = Dataset(operator=op, train=splits["train"], val=splits["val"], test=splits["test"], meta=meta)
    if verify:
        _verify_dataset(dataset, r)
    return dataset


def _verify_dataset(dataset: Dataset, r: int) -> None:
    defect = dataset.operator.orthonormality_defect()
    if defect > 1e-10:
        raise FormatError(f"operator rows are not orthonormal (defect {defect:.3g})")
    for name in SPLIT_NAMES:
        sp = dataset.split(name)
        n = len(sp)
        if n == 0:
            continue
        count = max(1, int(n * SPOT_CHECK_FRACTION))
        for i in np.linspace(0, n - 1, count).astype(int):
            X, b = sp.X[i], sp.b[i]
            if not np.allclose(b, dataset.operator.apply(X), rtol=1e-10, atol=1e-12):
                raise FormatError(f"instance {i} of split '{name}' fails b = apply(X)")
            s = np.linalg.svd(X, compute_uv=False)
            if r < len(s) and s[r] > RANK_RTOL * max(s[0], 1e-300):
                raise FormatError(f"instance {i} of split '{name}' exceeds rank {r}")


def dataset_digest(path) -> str:
    """Content digest of a stored dataset, for report provenance."""
    return blobio.container_digest(path)
