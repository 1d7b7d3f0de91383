"""ADAM training of the unrolled network, evaluation, and checkpoints.

Training follows the protocol: shuffle the training split each epoch, take
minibatch gradients, apply bias-corrected ADAM, and compute the FULL
validation-set loss after every parameter update (thinnable via
``val_every``).  The best-so-far parameters are snapshotted and returned;
the run stops once ``patience`` consecutive updates have passed without a
new validation best, or at the epoch cap.

Checkpoints are blob containers (manifest + float64 blobs for the parameter
fields, and the ADAM moments when provided).  Loss units throughout this
module are mean squared Frobenius error per instance; ``EvalResult`` also
exposes the per-entry normalization (divide by d^2) used when quoting MSE
tables.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import blobio
from .datagen import Dataset, Split
from .errors import FormatError, NumericError, TrainingDivergedError
from .measurement import VEC_CONVENTION, MeasurementOperator
from .network import Theta, ThetaGrad, backward_batch, forward_batch, mse_loss
from .svt import SvtConfig, svt_solve_batch

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_FORMAT = "lsvt-checkpoint-v1"
LAYER_CONVENTION = "H hidden layers + 1 output layer; delta[0] scales b into y0"


@dataclass
class TrainConfig:
    """Optimization hyperparameters.

    ``patience`` counts consecutive parameter updates without a new
    validation best (relative improvement below ``min_rel_improvement`` does
    not count as a best).  ``val_every`` thins validation to every k-th
    update; the improvement counter still advances per update.
    """

    learning_rate: float = 1e-4
    minibatch_size: int = 1000
    max_epochs: int = 500
    patience: int = 200
    val_every: int = 1
    min_rel_improvement: float = 1e-6
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.minibatch_size < 1:
            raise ValueError(f"minibatch_size must be >= 1, got {self.minibatch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.val_every < 1:
            raise ValueError(f"val_every must be >= 1, got {self.val_every}")


@dataclass
class TrainState:
    """Mutable optimizer state: parameters, ADAM moments, progress trackers."""

    theta: Theta
    m1: ThetaGrad
    m2: ThetaGrad
    step: int = 0
    best_val: float = np.inf
    best_theta: Theta | None = None
    since_improvement: int = 0

    @classmethod
    def fresh(cls, theta: Theta) -> "TrainState":
        return cls(
            theta=theta,
            m1=ThetaGrad.zeros_like(theta),
            m2=ThetaGrad.zeros_like(theta),
        )


def adam_step(state: TrainState, grad: ThetaGrad, lr: float) -> TrainState:
    """One bias-corrected ADAM update, applied in place to state.theta.

    Raises NumericError on a non-finite gradient, leaving the state untouched.
    """
    pairs = [
        (state.theta.W, grad.W, state.m1.W, state.m2.W),
        (state.theta.delta, grad.delta, state.m1.delta, state.m2.delta),
        (state.theta.tau, grad.tau, state.m1.tau, state.m2.tau),
    ]
    for theta_arr, g, _, _ in pairs:
        if g.shape != theta_arr.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta_arr.shape}")
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient")
    t = state.step + 1
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for theta_arr, g, m1, m2 in pairs:
        m1 *= ADAM_BETA1
        m1 += (1.0 - ADAM_BETA1) * g
        m2 *= ADAM_BETA2
        m2 += (1.0 - ADAM_BETA2) * g * g
        theta_arr -= lr * (m1 / c1) / (np.sqrt(m2 / c2) + ADAM_EPS)
    state.step = t
    return state


@dataclass
class History:
    """Loss curve: one row per recorded step.

    ``train_mse`` is the minibatch loss before the update (None at step 0);
    ``val_mse`` is the full validation loss (None when thinned out).
    """

    steps: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)

    def append(self, step: int, train: float | None, val: float | None) -> None:
        self.steps.append(step)
        self.train_mse.append(train)
        self.val_mse.append(val)

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "train_minibatch_mse", "val_mse"])
            for s, tr, va in zip(self.steps, self.train_mse, self.val_mse):
                writer.writerow([s, "" if tr is None else repr(tr), "" if va is None else repr(va)])


def _chunked(fn, B: np.ndarray, threads: int) -> np.ndarray:
    if threads <= 1 or B.shape[0] < 2 * threads:
        return fn(B)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(fn, np.array_split(B, threads)))
    return np.concatenate(parts)


def _network_outputs(theta: Theta, B: np.ndarray, threads: int) -> np.ndarray:
    return _chunked(lambda Bc: forward_batch(theta, Bc, check_finite=False)[0], B, threads)


@dataclass(frozen=True)
class EvalResult:
    """Per-instance squared Frobenius errors plus divergence bookkeeping.

    Diverged reconstructions appear as NaN in ``per_instance`` and are
    excluded from the means.  ``mse_per_entry`` divides by d^2; quoted MSE
    tables use that normalization.
    """

    per_instance: np.ndarray
    d: int
    n_diverged: int

    @property
    def n_total(self) -> int:
        return self.per_instance.shape[0]

    @property
    def mean_frob_sq(self) -> float:
        finite = self.per_instance[np.isfinite(self.per_instance)]
        return float(finite.mean()) if finite.size else float("nan")

    @property
    def mse_per_entry(self) -> float:
        return self.mean_frob_sq / (self.d * self.d)

    def quantiles(self, qs=(0.1, 0.5, 0.9)) -> dict:
        finite = self.per_instance[np.isfinite(self.per_instance)]
        if finite.size == 0:
            return {f"q{int(100 * q)}": float("nan") for q in qs}
        return {f"q{int(100 * q)}": float(np.quantile(finite, q)) for q in qs}


def evaluate(
    solver,
    split: Split,
    op: MeasurementOperator | None = None,
    threads: int = 1,
) -> EvalResult:
    """Reconstruction error of a solver over a split.

    ``solver`` is either a Theta (network weights) or an SvtConfig (the
    classic solver; requires ``op``).
    """
    if len(split) == 0:
        raise ValueError("empty split")
    if isinstance(solver, Theta):
        d = solver.d
        X_pred = _network_outputs(solver, split.b, threads)
    elif isinstance(solver, SvtConfig):
        if op is None:
            raise ValueError("evaluating an SvtConfig requires the measurement operator")
        d = op.d
        X_pred = _chunked(lambda Bc: svt_solve_batch(op, Bc, solver)[0], split.b, threads)
    else:
        raise TypeError(f"solver must be Theta or SvtConfig, got {type(solver).__name__}")
    diff = X_pred - split.X
    per = np.sum(diff * diff, axis=(1, 2))
    mask = np.isfinite(per)
    per = np.where(mask, per, np.nan)
    return EvalResult(per_instance=per, d=d, n_diverged=int((~mask).sum()))


def train(
    dataset: Dataset,
    theta0: Theta,
    config: TrainConfig,
    threads: int = 1,
) -> tuple[Theta, History]:
    """Optimize from ``theta0``; returns the best-on-validation parameters.

    Raises TrainingDivergedError (history attached) if the forward pass or
    the validation loss ever leaves the finite range.
    """
    tr, va = dataset.train, dataset.val
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("training requires nonempty train and val splits")
    state = TrainState.fresh(theta0.copy())
    history = History()

    def val_loss(step):
        try:
            X_pred = _network_outputs(state.theta, va.b, threads)
        except NumericError as e:
            raise TrainingDivergedError(
                f"validation forward diverged at step {step}", history
            ) from e
        loss = mse_loss(va.X, X_pred)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"validation loss non-finite at step {step}", history
            )
        return loss

    v0 = val_loss(0)
    state.best_val = v0
    state.best_theta = state.theta.copy()
    history.append(0, None, v0)

    rng = np.random.default_rng(config.shuffle_seed)
    stop = False
    for _ in range(config.max_epochs):
        perm = rng.permutation(len(tr))
        for lo in range(0, len(tr), config.minibatch_size):
            idx = perm[lo : lo + config.minibatch_size]
            Xb, bb = tr.X[idx], tr.b[idx]
            try:
                X_out, tape = forward_batch(state.theta, bb)
                train_loss = mse_loss(Xb, X_out)
                grad = backward_batch(state.theta, tape, Xb)
                adam_step(state, grad, config.learning_rate)
            except NumericError as e:
                raise TrainingDivergedError(
                    f"training step {state.step + 1} diverged", history
                ) from e
            val = None
            if state.step % config.val_every == 0:
                val = val_loss(state.step)
                if val < state.best_val * (1.0 - config.min_rel_improvement):
                    state.best_val = val
                    state.best_theta = state.theta.copy()
                    state.since_improvement = 0
                else:
                    state.since_improvement += config.val_every
            else:
                state.since_improvement += 1
            history.append(state.step, train_loss, val)
            if state.since_improvement >= config.patience:
                stop = True
                break
        if stop:
            break
    return state.best_theta, history


def save_checkpoint(
    path,
    theta: Theta,
    step: int = 0,
    best_val: float | None = None,
    moments: tuple | None = None,
    extra: dict | None = None,
) -> None:
    """Write a checkpoint container for ``theta`` (plus moments if given)."""
    arrays = {"theta_w": theta.W, "theta_delta": theta.delta, "theta_tau": theta.tau}
    if moments is not None:
        m1, m2 = moments
        arrays.update(
            m1_w=m1.W, m1_delta=m1.delta, m1_tau=m1.tau,
            m2_w=m2.W, m2_delta=m2.delta, m2_tau=m2.tau,
        )
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "m": theta.m,
        "d": theta.d,
        "num_hidden": theta.num_hidden,
        "num_layers": theta.num_layers,
        "layer_convention": LAYER_CONVENTION,
        "vec_convention": VEC_CONVENTION,
        "field_order": ["W", "delta", "tau"],
        "adam": {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS},
        "step": step,
        "best_val": best_val,
        "has_moments": moments is not None,
    }
    if extra:
        manifest.update(extra)
    blobio.write_container(path, manifest, arrays)


def load_checkpoint(path) -> tuple[Theta, dict]:
    """Read back a checkpoint; returns (theta, manifest)."""
    manifest = blobio.read_manifest(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unrecognized checkpoint format {manifest.get('format')!r}")
    theta = Theta(
        W=blobio.load_blob(path, manifest, "theta_w"),
        delta=blobio.load_blob(path, manifest, "theta_delta"),
        tau=blobio.load_blob(path, manifest, "theta_tau"),
    )
    if theta.m != manifest["m"] or theta.d != manifest["d"] or theta.num_hidden != manifest["num_hidden"]:
        raise FormatError("checkpoint dims disagree with manifest")
    return theta, manifest


def load_moments(path) -> tuple[ThetaGrad, ThetaGrad]:
    """ADAM moment buffers from a checkpoint that stored them."""
    manifest = blobio.read_manifest(path)
    if not manifest.get("has_moments"):
        raise FormatError("checkpoint has no moment blobs")
    def grab(prefix):
        return ThetaGrad(
            W=blobio.load_blob(path, manifest, f"{prefix}_w"),
            delta=blobio.load_blob(path, manifest, f"{prefix}_delta"),
            tau=blobio.load_blob(path, manifest, f"{prefix}_tau"),
        )
    return grab("m1"), grab("m2")


def checkpoint_digest(path) -> str:
    """Content digest of a stored checkpoint, for report provenance."""
    return blobio.container_digest(path)
