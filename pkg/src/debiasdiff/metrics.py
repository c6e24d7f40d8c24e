"""Evaluation: spurious-attribute bias, Frechet-lite, k-NN recall, label
fidelity, and a downstream augmentation test with a logistic classifier.

All features are the raw D-dim coordinates; at D=4 the data space already is
the semantic space, so no embedding network sits in front of the metrics.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Param, Tape, Tensor
from .datasets import BiasedDataset, oracle_label, oracle_spurious

JITTER = 1e-6
MIN_BIAS_SAMPLES = 32


def bias_from_frequencies(freqs) -> float:
    """Mean over the K(K-1)/2 class pairs of |freq_i - freq_j|."""
    f = np.asarray(freqs, dtype=np.float64).reshape(-1)
    K = f.shape[0]
    if K < 2:
        raise ValueError(f"bias needs at least 2 classes, got K={K}")
    pairs = list(itertools.combinations(range(K), 2))
    return float(sum(abs(f[i] - f[j]) for i, j in pairs) / len(pairs))


def bias_metric(samples, K: int = 2, classifier=oracle_spurious, min_samples: int = MIN_BIAS_SAMPLES) -> float:
    """Classify generated samples for one prompt and return their class-frequency disparity."""
    if K < 2:
        raise ValueError(f"bias needs at least 2 classes, got K={K}")
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < min_samples:
        raise ValueError(f"bias needs at least {min_samples} samples per prompt, got {x.shape[0]}")
    labels = np.asarray(classifier(x), dtype=np.int64)
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError("classifier output outside 0..K-1")
    freqs = np.bincount(labels, minlength=K) / labels.shape[0]
    return bias_from_frequencies(freqs)


def _sqrtm_psd(A: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((A + A.T) / 2.0)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (A^1/2 B A^1/2)^1/2)."""
    mu_a, mu_b = np.asarray(mu_a, dtype=np.float64), np.asarray(mu_b, dtype=np.float64)
    A, B = np.asarray(cov_a, dtype=np.float64), np.asarray(cov_b, dtype=np.float64)
    for name, C in (("A", A), ("B", B)):
        if np.linalg.eigvalsh((C + C.T) / 2.0).min() <= 0.0:
            raise ValueError(f"covariance of set {name} is degenerate")
    ra = _sqrtm_psd(A)
    cross = _sqrtm_psd(ra @ B @ ra)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(A) + np.trace(B) - 2.0 * np.trace(cross))
    # round-off can leave a tiny negative value for matching moments
    return max(value, 0.0)


def frechet_lite(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ad.ShapeError("frechet_lite", a.shape, b.shape)
    d = a.shape[1]
    if min(a.shape[0], b.shape[0]) < d + 1:
        raise ValueError(f"each set needs at least D+1={d + 1} points")
    jit = JITTER * np.eye(d)
    return frechet_from_moments(a.mean(0), np.cov(a, rowvar=False) + jit,
                                b.mean(0), np.cov(b, rowvar=False) + jit)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), 0.0))


def knn_recall(real, generated, k: int = 3) -> float:
    """Fraction of real points inside the union of k-NN balls around generated points.

    Each generated point's radius is the distance to its k-th nearest other
    generated point. Ball membership is inclusive, so a radius of zero still
    covers the point itself.
    """
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(generated, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be positive")
    if real.shape[0] < k + 1 or gen.shape[0] < k + 1:
        raise ValueError(f"both sets need at least k+1={k + 1} points")
    dg = _pairwise(gen, gen)
    # column 0 of the sorted row is the point itself
    radii = np.sort(dg, axis=1)[:, k]
    covered = np.zeros(real.shape[0], dtype=bool)
    for start in range(0, real.shape[0], 1024):
        chunk = _pairwise(real[start:start + 1024], gen)
        covered[start:start + 1024] = (chunk <= radii[None, :]).any(axis=1)
    return float(covered.mean())


def fidelity(samples, y: int) -> float:
    """Fraction of samples the label oracle assigns to the sampling condition."""
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] == 0:
        return 0.0
    return float(np.mean(oracle_label(x) == y))


@dataclass
class AugResult:
    acc: float
    worst_group_acc: float
    group_acc: list[float]


def _canonical_order(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # full-batch training on a canonically sorted copy makes results independent of input order
    keys = np.column_stack([x, y[:, None].astype(np.float64)])
    order = np.lexsort(keys.T[::-1])
    return x[order], y[order]


def fit_logistic(x, y, steps: int = 500, lr: float = 0.05) -> tuple[np.ndarray, float]:
    """Full-batch Adam on mean binary cross-entropy from a zero init."""
    x, y = _canonical_order(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64))
    w = Param("w", np.zeros((x.shape[1], 1)))
    b = Param("b", np.zeros(1))
    state = AdamState.create([w, b], lr=lr)
    X = Tensor(x)
    sign = Tensor((1.0 - 2.0 * y)[:, None])  # softplus(-z) for y=1, softplus(z) for y=0
    for _ in range(steps):
        tape = Tape()
        z = ad.add_bias(X @ tape.watch(w), tape.watch(b))
        loss = ad.mean(ad.softplus(ad.mul(z, sign)))
        tape.backward(loss)
        ad.adam_step(state, [w, b])
    return w.value[:, 0].copy(), float(b.value[0])


def augmentation_eval(train: BiasedDataset, generated: tuple[np.ndarray, np.ndarray] | None,
                      test: BiasedDataset, steps: int = 500, lr: float = 0.05) -> AugResult:
    """Train on real (+ generated) data to predict y; score on the balanced test set.

    ``generated`` is ``(samples, y)`` with labels taken from the sampling condition.
    """
    x, y = train.samples, train.y
    if generated is not None and len(generated[0]):
        gx, gy = np.asarray(generated[0], dtype=np.float64), np.asarray(generated[1], dtype=np.int64)
        x = np.concatenate([x, gx])
        y = np.concatenate([y, gy])
    w, b = fit_logistic(x, y, steps, lr)
    pred = (test.samples @ w + b > 0).astype(np.int64)
    correct = pred == test.y
    groups = test.groups
    accs = []
    for g in range(4):
        mask = groups == g
        if not mask.any():
            raise ValueError(f"test set has no samples in group (y={g // 2}, s={g % 2})")
        accs.append(float(correct[mask].mean()))
    return AugResult(float(correct.mean()), min(accs), accs)


@dataclass
class ExperimentReport:
    model: str
    bias_mean: float
    bias_std: float
    bias_per_prompt: list[float]
    frechet: float
    recall: float
    fidelity: float
    seeds: list[int]
    config: dict = field(default_factory=dict)
    purity: float | None = None

    def __post_init__(self):
        for name in ("bias_mean", "bias_std", "frechet", "recall", "fidelity"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"report field {name} is not finite")
        if not 0.0 <= self.bias_mean <= 1.0:
            raise ValueError("bias must lie in [0, 1]")

    def to_doc(self) -> dict:
        return asdict(self)


def evaluate_samples(model: str, samples: dict[int, list[np.ndarray]], reference: np.ndarray,
                     seeds: list[int], k: int = 3, config: dict | None = None) -> ExperimentReport:
    """Metrics over per-prompt, per-seed sample sets.

    Bias is computed per (prompt, seed) batch; its mean and std are over all of
    them. Frechet-lite and recall pool every sample against ``reference``.
    """
    biases, per_prompt, fids = [], [], []
    for y in sorted(samples):
        b = [bias_metric(x) for x in samples[y]]
        biases += b
        per_prompt.append(float(np.mean(b)))
        fids.append(fidelity(np.concatenate(samples[y]), y))
    pooled = np.concatenate([x for y in sorted(samples) for x in samples[y]])
    return ExperimentReport(
        model=model,
        bias_mean=float(np.mean(biases)),
        bias_std=float(np.std(biases)),
        bias_per_prompt=per_prompt,
        frechet=frechet_lite(pooled, reference),
        recall=knn_recall(reference, pooled, k),
        fidelity=float(np.mean(fids)),
        seeds=list(seeds),
        config=dict(config or {}),
    )
