"""Synthetic 4-d data with a tunable spurious correlation.

Dims 0-1 carry the label y (cluster centre (+-2, 0)); dims 2-3 carry the hidden
attribute s (centre (0, +-2)). ``rho`` is P(s == y); the test split uses
rho = 0.5 so the attribute is independent of the label there.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io

D = 4
N_LABELS = 2
N_ATTRS = 2
TEST_SEED_OFFSET = 7919

INV_CENTERS = np.array([[-2.0, 0.0], [2.0, 0.0]])
SP_CENTERS = np.array([[0.0, -2.0], [0.0, 2.0]])


@dataclass(eq=False)
class BiasedDataset:
    samples: np.ndarray
    y: np.ndarray
    s: np.ndarray
    rho: float
    sigma: float
    seed: int

    @property
    def n(self) -> int:
        return int(self.samples.shape[0])

    @property
    def d(self) -> int:
        return int(self.samples.shape[1])

    @property
    def groups(self) -> np.ndarray:
        """True group index y * N_ATTRS + s."""
        return self.y * N_ATTRS + self.s

    def __eq__(self, other) -> bool:
        if not isinstance(other, BiasedDataset):
            return NotImplemented
        return (
            np.array_equal(self.samples, other.samples)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.s, other.s)
            and self.rho == other.rho
            and self.sigma == other.sigma
            and self.seed == other.seed
        )

    def subset(self, idx) -> "BiasedDataset":
        idx = np.asarray(idx)
        return BiasedDataset(self.samples[idx], self.y[idx], self.s[idx], self.rho, self.sigma, self.seed)


@dataclass(eq=False)
class DatasetSplit:
    train: BiasedDataset
    test: BiasedDataset


def synthesize(n: int, rho: float, sigma: float, seed: int) -> BiasedDataset:
    if n < 8:
        raise ValueError(f"need at least 8 samples, got {n}")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    rng = io.stream(seed, "dataset")
    y = rng.integers(0, N_LABELS, size=n)
    flip = rng.random(n) >= rho
    s = np.where(flip, 1 - y, y)
    centers = np.concatenate([INV_CENTERS[y], SP_CENTERS[s]], axis=1)
    x = centers + sigma * rng.standard_normal((n, D))
    return BiasedDataset(x, y.astype(np.int64), s.astype(np.int64), float(rho), float(sigma), int(seed))


def make_split(n_train: int, n_test: int, rho: float, sigma: float, seed: int) -> DatasetSplit:
    return DatasetSplit(
        train=synthesize(n_train, rho, sigma, seed),
        test=synthesize(n_test, 0.5, sigma, seed + TEST_SEED_OFFSET),
    )


def oracle_spurious(x) -> np.ndarray | int:
    """1 where x[3] > 0, else 0. Accepts one vector or an (n, D) batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 4:
        raise ValueError("oracle_spurious needs at least 4 dims")
    out = (x[..., 3] > 0).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def oracle_label(x) -> np.ndarray | int:
    """1 where x[0] > 0, else 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("oracle_label needs at least 2 dims")
    out = (x[..., 0] > 0).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def to_doc(ds: BiasedDataset) -> dict:
    return {
        "version": io.FORMAT_VERSION,
        "n": ds.n,
        "d": ds.d,
        "rho": ds.rho,
        "sigma": ds.sigma,
        "seed": ds.seed,
        "samples": ds.samples.tolist(),
        "y": ds.y.tolist(),
        "s": ds.s.tolist(),
    }


def from_doc(doc: dict, source: str = "<dataset>") -> BiasedDataset:
    try:
        n, d = int(doc["n"]), int(doc["d"])
        x = np.array(doc["samples"], dtype=np.float64)
        y = np.array(doc["y"], dtype=np.int64)
        s = np.array(doc["s"], dtype=np.int64)
        ds = BiasedDataset(x.reshape(n, d), y, s, float(doc["rho"]), float(doc["sigma"]), int(doc["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise io.ArtifactError(f"{source}: malformed dataset ({exc})") from None
    if ds.y.shape != (n,) or ds.s.shape != (n,):
        raise io.ArtifactError(f"{source}: label arrays do not match n={n}")
    return ds


def save(ds: BiasedDataset, path: str | Path, **extra) -> None:
    doc = to_doc(ds)
    doc.update(extra)
    io.write_json(path, doc)


def load(path: str | Path) -> BiasedDataset:
    return from_doc(io.read_json(path), str(path))
