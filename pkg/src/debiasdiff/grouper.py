"""Environment inference from a frozen model's per-sample losses.

A soft assignment W (rows of a softmax over logits) is chosen to maximize the
spread of group-mean losses plus a dispersion bonus on the smallest group mean:

    J(W) = Var_e(L_e) + omega * min_e(L_e),   L_e = sum_n W_ne l_n / N_e

with soft counts N_e = sum_n W_ne. The min is smoothed with a temperature for
the gradient; the exact min is reported alongside.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericalError, Param, Tape, Tensor
from .datasets import BiasedDataset
from .diffusion import NoiseSchedule, forward_noise
from .models import Denoiser

log = logging.getLogger(__name__)

COUNT_FLOOR = 1e-8
TAU = 0.01


@dataclass
class PerSampleLoss:
    values: np.ndarray
    M: int
    seed: int


def per_sample_loss(
    ds: BiasedDataset,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    M: int,
    seed: int,
    eps_fn=None,
) -> PerSampleLoss:
    """Monte Carlo diffusion loss per sample, with the same (t_m, eps_m) for every sample."""
    if M < 1:
        raise ValueError("M must be at least 1")
    if ds.d != denoiser.d:
        raise ValueError(f"checkpoint expects {denoiser.d}-dim data, dataset has {ds.d}")
    rng = np.random.default_rng(seed)
    total = np.zeros(ds.n)
    for _ in range(M):
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(ds.d)
        noise = np.broadcast_to(eps, ds.samples.shape)
        x_t = forward_noise(schedule, ds.samples, t, noise)
        pred = eps_fn(x_t, t) if eps_fn is not None else denoiser(x_t, t, ds.y)
        total += ((noise - pred) ** 2).sum(axis=1)
    return PerSampleLoss(total / M, M, seed)


@dataclass
class Objective:
    smooth: Tensor       # differentiable surrogate (smooth min)
    j: float             # exact objective
    var: float
    min: float
    group_losses: np.ndarray


def group_losses(W: Tensor, losses: np.ndarray) -> Tensor:
    """L_e = (sum_n W_ne l_n) / max(N_e, floor) as a length-E tensor."""
    ell = Tensor(np.asarray(losses, dtype=np.float64))
    if len(W.shape) != 2 or W.shape[0] != ell.shape[0]:
        raise ad.ShapeError("group_objective", W.shape, ell.shape)
    return ad.div(ell @ W, ad.clip_min(ad.sum(W, axis=0), COUNT_FLOOR))


def population_var(x: Tensor) -> Tensor:
    centred = ad.sub(x, ad.broadcast(ad.mean(x), x.shape))
    return ad.mean(ad.square(centred))


def smooth_min(x: Tensor, tau: float = TAU) -> Tensor:
    """-tau * log sum exp(-x / tau)."""
    return ad.scale(ad.logsumexp(ad.scale(x, -1.0 / tau)), -tau)


def group_objective(W, losses, omega: float, tau: float = TAU) -> Objective:
    W = W if isinstance(W, Tensor) else Tensor(W)
    L = group_losses(W, losses)
    var = population_var(L)
    smooth = ad.add(var, ad.scale(smooth_min(L, tau), omega))
    exact_min = float(L.data.min())
    return Objective(smooth, float(var.data) + omega * exact_min, float(var.data), exact_min, L.data.copy())


@dataclass
class GroupAssignment:
    logits: np.ndarray
    E: int
    omega: float
    seed: int
    j_final: float
    j_initial: float
    history: list[float] = field(default_factory=list)

    @property
    def W(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    @property
    def hard(self) -> np.ndarray:
        return np.argmax(self.W, axis=1)

    def hardened(self) -> np.ndarray:
        return np.eye(self.E)[self.hard]


def infer_groups(
    losses,
    E: int = 4,
    omega: float = 1.0,
    steps: int = 500,
    lr: float = 1e-2,
    seed: int = 0,
    init_scale: float = 0.01,
) -> GroupAssignment:
    """Adam ascent on J over the logits of W."""
    if E < 2:
        raise ValueError(f"need at least 2 groups, got E={E}")
    if steps < 1:
        raise ValueError("steps must be positive")
    ell = np.asarray(losses, dtype=np.float64)
    rng = np.random.default_rng(seed)
    logits = Param("W_logits", init_scale * rng.standard_normal((ell.shape[0], E)))
    state = AdamState.create([logits], lr=lr)
    history: list[float] = []
    j_initial = None
    for step in range(steps):
        tape = Tape()
        W = ad.softmax(tape.watch(logits))
        obj = group_objective(W, ell, omega)
        if not np.isfinite(obj.j):
            raise NumericalError(f"grouper objective non-finite at step {step}")
        if j_initial is None:
            j_initial = obj.j
        history.append(obj.j)
        tape.backward(obj.smooth, seed=-1.0)  # ascent
        ad.adam_step(state, [logits])
    final = group_objective(ad.softmax(Tensor(logits.value)), ell, omega)
    history.append(final.j)
    return GroupAssignment(logits.value.copy(), E, float(omega), int(seed), final.j, float(j_initial), history)


def random_assignment_objective(losses, E: int, omega: float, rng: np.random.Generator) -> float:
    """J of a uniformly random hard assignment, the no-information baseline."""
    ell = np.asarray(losses, dtype=np.float64)
    W = np.eye(E)[rng.integers(0, E, size=ell.shape[0])]
    return group_objective(W, ell, omega).j


@dataclass
class Alignment:
    purity: float
    mapping: dict[int, int]
    flagged: bool


def group_alignment(W, true_groups, n_true: int | None = None) -> Alignment:
    """Best one-to-one agreement between argmax groups of W and the true groups.

    When there are more true groups than inferred ones only the best-matching
    subset of true groups can be covered, and the result is flagged.
    """
    W = np.asarray(W)
    E = W.shape[1]
    if E > 8:
        raise ValueError("group_alignment searches permutations; E must be <= 8")
    g = np.asarray(true_groups, dtype=np.int64)
    n_true = int(n_true if n_true is not None else g.max() + 1)
    hard = np.argmax(W, axis=1)
    table = np.zeros((E, n_true))
    np.add.at(table, (hard, g), 1.0)
    best, best_map = -1.0, {}
    if E <= n_true:
        for perm in itertools.permutations(range(n_true), E):
            score = table[np.arange(E), perm].sum()
            if score > best:
                best, best_map = score, dict(zip(range(E), perm))
    else:
        for perm in itertools.permutations(range(E), n_true):
            score = table[perm, np.arange(n_true)].sum()
            if score > best:
                best, best_map = score, {e: k for k, e in enumerate(perm)}
    return Alignment(best / len(g), best_map, n_true > E)
