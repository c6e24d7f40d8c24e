"""Linear-beta DDPM: schedule, forward corruption, training loss and sampler."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericalError, Tape, Tensor
from .datasets import BiasedDataset
from .models import NULL, Denoiser, Guidance, effective_noise

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by timestep t = 1..T (stored at position t - 1)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    def at(self, table: np.ndarray, t) -> np.ndarray:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}")
        return table[t - 1]


def make_schedule(T: int = 100, beta_min: float = 1e-3, beta_max: float = 0.2) -> NoiseSchedule:
    if T < 10:
        raise ValueError(f"T must be at least 10, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = (1.0 - prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma2)


def forward_noise(schedule: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, row-wise for batched t."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ad.ShapeError("forward_noise", x0.shape, eps.shape)
    ab = schedule.at(schedule.alpha_bar, t)
    if x0.ndim == 2:
        ab = np.broadcast_to(ab, (x0.shape[0],))[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass
class NoiseDraw:
    t: np.ndarray
    eps: np.ndarray
    drop: np.ndarray


def draw_noise(rng: np.random.Generator, n: int, d: int, T: int, p_drop: float = 0.0) -> NoiseDraw:
    t = rng.integers(1, T + 1, size=n)
    eps = rng.standard_normal((n, d))
    drop = rng.random(n) < p_drop
    return NoiseDraw(t, eps, drop)


def ddpm_loss(
    denoiser: Denoiser,
    x0: np.ndarray,
    y: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
    p_drop: float = 0.0,
    tape: Tape | None = None,
    draw: NoiseDraw | None = None,
) -> tuple[Tensor, Tensor]:
    """Mean over the batch of ||eps - eps_theta(x_t, t, y)||^2.

    Returns ``(loss, residuals)``. Labels are replaced by the null label with
    probability ``p_drop``. Pass ``draw`` to reuse specific (t, eps) values.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    if draw is None:
        draw = draw_noise(rng, x0.shape[0], x0.shape[1], schedule.T, p_drop)
    labels = np.where(draw.drop, NULL, np.asarray(y))
    x_t = forward_noise(schedule, x0, draw.t, draw.eps)
    pred = denoiser.predict(x_t, draw.t, labels, tape=tape)
    resid = ad.sum(ad.square(ad.sub(Tensor(draw.eps), pred)), axis=1)
    return ad.mean(resid), resid


def sample(
    n: int,
    y: int,
    denoiser: Denoiser,
    guidance: Guidance | None,
    schedule: NoiseSchedule,
    seed: int | np.random.Generator,
    delta: float = 0.0,
    w_cfg: float = 0.0,
    eps_fn=None,
) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0 under label ``y``.

    ``eps_fn(x_t, t)`` overrides the model noise estimate (used for oracle tests).
    """
    if denoiser is None:
        raise ValueError("sampling needs a denoiser checkpoint")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = denoiser.d
    x = rng.standard_normal((n, d))
    for t in range(schedule.T, 0, -1):
        if eps_fn is not None:
            eps = eps_fn(x, t)
        else:
            eps = effective_noise(denoiser, guidance, x, t, y, delta, w_cfg)
        a = schedule.alpha[t - 1]
        ab = schedule.alpha_bar[t - 1]
        mean = (x - (1.0 - a) / np.sqrt(1.0 - ab) * eps) / np.sqrt(a)
        if t > 1:
            x = mean + np.sqrt(schedule.sigma2[t - 1]) * rng.standard_normal((n, d))
        else:
            x = mean
    if not np.all(np.isfinite(x)):
        raise NumericalError("sampler produced non-finite values")
    return x


@dataclass
class PretrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 64
    p_drop: float = 0.1


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["step,loss"] + [f"{s},{v!r}" for s, v in zip(self.steps, self.loss)]
        return "\n".join(rows) + "\n"

    def tail_mean(self, k: int = 100) -> float:
        return float(np.mean(self.loss[-k:]))


def pretrain_biased(
    ds: BiasedDataset,
    schedule: NoiseSchedule,
    config: PretrainConfig,
    rng: np.random.Generator,
    init_seed: int = 0,
    n_labels: int = 2,
) -> tuple[Denoiser, TrainLog]:
    """Fit a conditional denoiser to the (biased) training set with label dropout."""
    net = Denoiser(ds.d, n_labels, schedule.T, seed=init_seed)
    state = AdamState.create(net.params, lr=config.lr)
    history = TrainLog()
    for step in range(config.steps):
        idx = rng.integers(0, ds.n, size=config.batch)
        tape = Tape()
        loss, _ = ddpm_loss(net, ds.samples[idx], ds.y[idx], schedule, rng, config.p_drop, tape=tape)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(f"pretraining loss became non-finite at step {step}")
        tape.backward(loss)
        ad.adam_step(state, net.params)
        history.steps.append(step)
        history.loss.append(value)
        if step % 500 == 0:
            log.debug("pretrain step %d loss %.4f", step, value)
    return net, history
