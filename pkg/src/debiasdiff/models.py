"""Noise-prediction networks: frozen conditional denoiser and the guidance net.

The guidance network sees the label only through its own learned encoder, so
training it never touches the denoiser's label table. Both networks start with
a zero output layer: a fresh denoiser predicts zero noise and a fresh guidance
net leaves the denoiser's prediction untouched.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import io
from .autodiff import Param, Tape, Tensor

NULL = -1
TIME_DIM = 16
LABEL_DIM = 8
GUIDANCE_WIDTHS = (128, 64, 32, 16)


def time_embedding(t, T: int) -> np.ndarray:
    """Sinusoidal features [sin(t w_k), cos(t w_k)] for 8 log-spaced w_k in [1/T, 1]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = np.geomspace(1.0 / T, 1.0, TIME_DIM // 2)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)


def _check_timesteps(t, T: int) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim == 0:
        t = t.reshape(1)
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(t == np.round(t)):
            raise ValueError("timesteps must be integers")
        t = t.astype(np.int64)
    if t.size and (t.min() < 1 or t.max() > T):
        raise ValueError(f"timestep out of range 1..{T}: [{t.min()}, {t.max()}]")
    return t


def _linear(rng: np.random.Generator, name: str, fan_in: int, fan_out: int, zero: bool) -> list[Param]:
    if zero:
        w = np.zeros((fan_in, fan_out))
        b = np.zeros(fan_out)
    else:
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
    return [Param(f"{name}.W", w), Param(f"{name}.b", b)]


def _mlp(h: Tensor, bound, names: Sequence[str]) -> Tensor:
    for i, name in enumerate(names):
        h = ad.add_bias(h @ bound[f"{name}.W"], bound[f"{name}.b"])
        if i < len(names) - 1:
            h = ad.silu(h)
    return h


class _Net:
    kind = ""
    params: list[Param]
    arch: dict

    def bind(self, tape: Tape | None) -> dict[str, Tensor]:
        if tape is None:
            return {p.name: Tensor(p.value) for p in self.params}
        return {p.name: tape.watch(p) for p in self.params}

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def param(self, name: str) -> Param:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_doc(self, **extra) -> dict:
        doc = {
            "version": io.FORMAT_VERSION,
            "kind": self.kind,
            "arch": dict(self.arch),
            "params": {p.name: p.value.reshape(-1).tolist() for p in self.params},
        }
        doc.update(extra)
        return doc

    def load_values(self, values: dict, source: str) -> None:
        for p in self.params:
            if p.name not in values:
                raise io.ArtifactError(f"{source}: checkpoint lacks parameter {p.name!r}")
            arr = np.array(values[p.name], dtype=np.float64)
            if arr.size != p.size:
                raise io.ArtifactError(f"{source}: parameter {p.name!r} has {arr.size} values, expected {p.size}")
            p.value = arr.reshape(p.shape)
            p.grad = np.zeros_like(p.value)

    def save(self, path: str | Path, **extra) -> None:
        io.write_json(path, self.to_doc(**extra))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for p in self.params:
            p.value = snap[p.name].copy()
            p.grad = np.zeros_like(p.value)


class Denoiser(_Net):
    """eps_theta(x_t, t, y): MLP over [x_t, time features, label embedding]."""

    kind = "denoiser"

    def __init__(self, d: int = 4, n_labels: int = 2, T: int = 100, hidden: Sequence[int] = (128, 128), seed: int = 0):
        self.arch = {"d": d, "n_labels": n_labels, "T": T, "hidden": list(hidden),
                     "time_dim": TIME_DIM, "label_dim": LABEL_DIM}
        self.d, self.n_labels, self.T = d, n_labels, T
        rng = io.stream(seed, "init/denoiser")
        # last row is the null label used for the unconditional branch
        self.params = [Param("label_emb", rng.standard_normal((n_labels + 1, LABEL_DIM)))]
        widths = [d + TIME_DIM + LABEL_DIM, *hidden]
        self._layers = [f"l{i}" for i in range(len(hidden))] + ["out"]
        for i, name in enumerate(self._layers[:-1]):
            self.params += _linear(rng, name, widths[i], widths[i + 1], zero=False)
        self.params += _linear(rng, "out", widths[-1], d, zero=True)

    def label_index(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        bad = (y != NULL) & ((y < 0) | (y >= self.n_labels))
        if bad.any():
            raise ValueError(f"label out of range: {y[bad][:5].tolist()}")
        return np.where(y == NULL, self.n_labels, y)

    def predict(self, x_t, t, y, tape: Tape | None = None, bound=None) -> Tensor:
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        n = x_t.shape[0]
        t = np.broadcast_to(_check_timesteps(t, self.T), (n,))
        idx = np.broadcast_to(self.label_index(y), (n,))
        if x_t.shape[1] != self.d:
            raise ad.ShapeError("denoiser", x_t.shape, (n, self.d))
        w = bound if bound is not None else self.bind(tape)
        h = ad.concat([x_t, Tensor(time_embedding(t, self.T)), ad.take_rows(w["label_emb"], idx)], axis=1)
        return _mlp(h, w, self._layers)

    def __call__(self, x_t, t, y) -> np.ndarray:
        return self.predict(x_t, t, y).data

    @classmethod
    def from_doc(cls, doc: dict, source: str = "<denoiser>") -> "Denoiser":
        if doc.get("kind") != cls.kind:
            raise io.ArtifactError(f"{source}: expected a denoiser checkpoint, found {doc.get('kind')!r}")
        a = doc["arch"]
        net = cls(a["d"], a["n_labels"], a["T"], a["hidden"])
        net.load_values(doc["params"], source)
        return net

    @classmethod
    def load(cls, path: str | Path) -> "Denoiser":
        return cls.from_doc(io.read_json(path), str(path))


class Guidance(_Net):
    """G_psi(x_t, Phi(y), t) with a single hidden layer of ``width`` units."""

    kind = "guidance"

    def __init__(self, d: int = 4, n_labels: int = 2, T: int = 100, width: int = 128, seed: int = 0):
        self.arch = {"d": d, "n_labels": n_labels, "T": T, "width": width,
                     "time_dim": TIME_DIM, "phi_dim": LABEL_DIM}
        self.d, self.n_labels, self.T, self.width = d, n_labels, T, width
        rng = io.stream(seed, "init/guidance")
        self.params = [Param("phi", rng.standard_normal((n_labels, LABEL_DIM)))]
        # layer names differ from the denoiser's so joint (full) training keys stay unique
        self.params += _linear(rng, "hidden", d + TIME_DIM + LABEL_DIM, width, zero=False)
        self.params += _linear(rng, "shift", width, d, zero=True)

    def predict(self, x_t, t, y, tape: Tape | None = None, bound=None) -> Tensor:
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        n = x_t.shape[0]
        t = np.broadcast_to(_check_timesteps(t, self.T), (n,))
        y = np.broadcast_to(np.asarray(y, dtype=np.int64).reshape(-1), (n,))
        if ((y < 0) | (y >= self.n_labels)).any():
            raise ValueError("guidance needs a concrete label; the null label has no encoding")
        w = bound if bound is not None else self.bind(tape)
        h = ad.concat([x_t, Tensor(time_embedding(t, self.T)), ad.take_rows(w["phi"], y)], axis=1)
        return _mlp(h, w, ["hidden", "shift"])

    def __call__(self, x_t, t, y) -> np.ndarray:
        return self.predict(x_t, t, y).data

    @classmethod
    def from_doc(cls, doc: dict, source: str = "<guidance>") -> "Guidance":
        if doc.get("kind") != cls.kind:
            raise io.ArtifactError(f"{source}: expected a guidance checkpoint, found {doc.get('kind')!r}")
        a = doc["arch"]
        net = cls(a["d"], a["n_labels"], a["T"], a["width"])
        net.load_values(doc["params"], source)
        return net

    @classmethod
    def load(cls, path: str | Path) -> "Guidance":
        return cls.from_doc(io.read_json(path), str(path))


def guidance_param_count(width: int, d: int = 4, n_labels: int = 2) -> int:
    fan_in = d + TIME_DIM + LABEL_DIM
    return n_labels * LABEL_DIM + fan_in * width + width + width * d + d


def effective_noise(
    denoiser: Denoiser,
    guidance: Guidance | None,
    x_t,
    t,
    y,
    delta: float = 0.0,
    w_cfg: float = 0.0,
) -> np.ndarray:
    """Noise estimate used by the sampler.

    CFG interpolation first, then the guidance shift is subtracted:
    eps_c + w (eps_c - eps_null) - delta * G. The minus sign follows from the
    training residual eps - eps_theta + delta * G.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    if w_cfg < 0:
        raise ValueError(f"w_cfg must be non-negative, got {w_cfg}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = denoiser(x_t, t, y)
    if w_cfg != 0.0:
        eps = eps + w_cfg * (eps - denoiser(x_t, t, NULL))
    if delta != 0.0 and guidance is not None:
        eps = eps - delta * guidance(x_t, t, y)
    return eps
