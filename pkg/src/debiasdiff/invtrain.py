"""Training the guidance net against the invariance-regularized diffusion loss.

For a batch with group weights W (rows of the inferred assignment):

    r_n  = ||eps - eps_theta(x_t, t, y) + delta * G(x_t, Phi(y), t)||^2
    erm  = mean_n r_n
    L_e  = sum_n W_ne r_n / (sum_n W_ne + 1e-8)
    loss = erm + lambda * Var_e(L_e)

The denoiser is frozen; only the guidance parameters (and optionally the
denoiser too, for the full fine-tuning variant) receive updates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericalError, Tape, Tensor
from .datasets import BiasedDataset
from .diffusion import NoiseDraw, NoiseSchedule, draw_noise, forward_noise
from .grouper import population_var
from .models import Denoiser, Guidance

log = logging.getLogger(__name__)

MASS_EPS = 1e-8
MIN_GROUP_MASS = 1e-6


@dataclass
class InvTrainConfig:
    delta: float = 0.3
    lam: float = 1.0
    steps: int = 8000
    batch: int = 64
    lr: float = 1e-3
    width: int = 128
    w_source: str = "soft"
    full: bool = False
    # erm rising above this multiple of its starting level marks the run unstable
    blowup_factor: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.w_source not in ("soft", "hard"):
            raise ValueError(f"w_source must be 'soft' or 'hard', got {self.w_source!r}")


@dataclass
class InvLoss:
    loss: Tensor
    erm: Tensor
    var: Tensor
    residuals: Tensor
    skipped: list[int]


def invariant_loss(
    x0: np.ndarray,
    y: np.ndarray,
    W: np.ndarray,
    guidance: Guidance,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    delta: float,
    lam: float,
    rng: np.random.Generator | None = None,
    tape: Tape | None = None,
    draw: NoiseDraw | None = None,
    train_denoiser: bool = False,
) -> InvLoss:
    x0 = np.asarray(x0, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.shape[0] != x0.shape[0]:
        raise ad.ShapeError("invariant_loss", x0.shape, W.shape)
    if draw is None:
        draw = draw_noise(rng, x0.shape[0], x0.shape[1], schedule.T)
    x_t = forward_noise(schedule, x0, draw.t, draw.eps)
    if train_denoiser:
        eps_theta = denoiser.predict(x_t, draw.t, y, tape=tape)
    else:
        eps_theta = Tensor(denoiser(x_t, draw.t, y))
    resid = ad.sub(Tensor(draw.eps), eps_theta)
    if delta != 0.0:
        g = guidance.predict(x_t, draw.t, y, tape=tape)
        resid = ad.add(resid, ad.scale(g, delta))
    r = ad.sum(ad.square(resid), axis=1)
    erm = ad.mean(r)

    mass = W.sum(axis=0)
    kept = np.flatnonzero(mass >= MIN_GROUP_MASS)
    skipped = [int(e) for e in np.flatnonzero(mass < MIN_GROUP_MASS)]
    if len(kept) >= 2:
        Wk = W[:, kept]
        L = ad.div(r @ Tensor(Wk), Tensor(mass[kept] + MASS_EPS))
        var = population_var(L)
    else:
        var = ad.scale(ad.sum(r), 0.0)
    loss = ad.add(erm, ad.scale(var, lam)) if lam != 0.0 else erm
    return InvLoss(loss, erm, var, r, skipped)


def dataset_objective(
    ds: BiasedDataset,
    W: np.ndarray,
    guidance: Guidance,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    delta: float,
    lam: float,
    seed: int = 0,
    reps: int = 4,
) -> tuple[float, float]:
    """(erm, var) over the whole training set, averaged over ``reps`` fixed noise draws.

    Batch-level var is dominated by which small groups happen to be sampled;
    this is the low-noise estimate used for start/end comparisons.
    """
    rng = np.random.default_rng(seed)
    erm, var = [], []
    for _ in range(reps):
        out = invariant_loss(ds.samples, ds.y, W, guidance, denoiser, schedule, delta, lam, rng)
        erm.append(float(out.erm.data))
        var.append(float(out.var.data))
    return float(np.mean(erm)), float(np.mean(var))


@dataclass
class InvTrainLog:
    step: list[int] = field(default_factory=list)
    erm: list[float] = field(default_factory=list)
    var: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    skipped_groups: int = 0
    var_initial: float = float("nan")
    var_final: float = float("nan")
    unstable: bool = False
    unstable_step: int | None = None

    def to_csv(self) -> str:
        rows = ["step,erm,var,loss"]
        rows += [f"{s},{e!r},{v!r},{l!r}" for s, e, v, l in zip(self.step, self.erm, self.var, self.loss)]
        return "\n".join(rows) + "\n"

    def window(self, key: str, start: int, stop: int) -> float:
        return float(np.mean(getattr(self, key)[start:stop]))


class TrainingAborted(NumericalError):
    def __init__(self, msg: str, last_good: dict, history: InvTrainLog):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


def train_guidance(
    ds: BiasedDataset,
    denoiser: Denoiser,
    W: np.ndarray,
    schedule: NoiseSchedule,
    config: InvTrainConfig,
    rng: np.random.Generator,
    init_seed: int = 0,
    n_labels: int = 2,
) -> tuple[Guidance, InvTrainLog]:
    """Adam over the guidance parameters; the denoiser's values are not modified
    unless ``config.full`` is set."""
    W = np.asarray(W, dtype=np.float64)
    if W.shape[0] != ds.n:
        raise ValueError(f"assignment has {W.shape[0]} rows, dataset has {ds.n} samples")
    if config.w_source == "hard":
        W = np.eye(W.shape[1])[np.argmax(W, axis=1)]
    guidance = Guidance(ds.d, n_labels, schedule.T, config.width, seed=init_seed)
    trainable = list(guidance.params) + (list(denoiser.params) if config.full else [])
    state = AdamState.create(trainable, lr=config.lr)
    history = InvTrainLog()
    _, history.var_initial = dataset_objective(ds, W, guidance, denoiser, schedule, config.delta, config.lam)
    window = 50
    baseline = None
    last_good = guidance.snapshot()
    for step in range(config.steps):
        idx = rng.integers(0, ds.n, size=config.batch)
        tape = Tape()
        try:
            out = invariant_loss(ds.samples[idx], ds.y[idx], W[idx], guidance, denoiser, schedule,
                                 config.delta, config.lam, rng, tape=tape, train_denoiser=config.full)
        except NumericalError as exc:
            raise TrainingAborted(f"non-finite loss at step {step}: {exc}", last_good, history) from None
        value = float(out.loss.data)
        if not np.isfinite(value):
            raise TrainingAborted(f"non-finite loss at step {step}", last_good, history)
        if out.skipped:
            history.skipped_groups += 1
        history.step.append(step)
        history.erm.append(float(out.erm.data))
        history.var.append(float(out.var.data))
        history.loss.append(value)
        if step + 1 == window:
            baseline = history.window("erm", 0, window)
        elif baseline is not None and step + 1 >= 2 * window and not history.unstable:
            recent = history.window("erm", step + 1 - window, step + 1)
            if recent > config.blowup_factor * baseline:
                history.unstable, history.unstable_step = True, step
                log.warning("erm rose %.1fx above its starting level at step %d", recent / baseline, step)
        if config.delta != 0.0 or config.full:
            tape.backward(out.loss)
        ad.adam_step(state, trainable)
        if step % 100 == 0:
            last_good = guidance.snapshot()
    _, history.var_final = dataset_objective(ds, W, guidance, denoiser, schedule, config.delta, config.lam)
    if history.skipped_groups:
        log.info("%d batches had at least one group without mass", history.skipped_groups)
    return guidance, history
