"""Local learners (softmax regression, one-hidden-layer MLP) and weighted aggregation.

Parameters travel as flat read-only vectors tagged with the architecture
they belong to, so snapshots can be shared between devices without
aliasing surprises.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, EvaluationError


@dataclass(frozen=True)
class Architecture:
    kind: str
    n_features: int
    n_classes: int
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ContractError(f"unknown architecture {self.kind!r}")
        if self.n_features < 1 or self.n_classes < 1 or (self.kind == "mlp" and self.hidden < 1):
            raise ContractError("architecture dimensions must be positive")

    @property
    def shape_tag(self) -> str:
        if self.kind == "logistic":
            return f"logistic:{self.n_features}:{self.n_classes}"
        return f"mlp:{self.n_features}:{self.hidden}:{self.n_classes}"

    @classmethod
    def from_tag(cls, tag: str) -> Architecture:
        kind, *dims = tag.split(":")
        dims = [int(v) for v in dims]
        if kind == "logistic" and len(dims) == 2:
            return cls("logistic", dims[0], dims[1])
        if kind == "mlp" and len(dims) == 3:
            return cls("mlp", dims[0], dims[2], dims[1])
        raise ContractError(f"bad shape tag {tag!r}")

    @property
    def layers(self) -> list[tuple[int, int]]:
        if self.kind == "logistic":
            return [(self.n_features, self.n_classes)]
        return [(self.n_features, self.hidden), (self.hidden, self.n_classes)]

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layers)

    def unpack(self, v: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``[(W, b), ...]`` into the flat vector (weights row-major, then bias)."""
        out, pos = [], 0
        for i, o in self.layers:
            w = v[pos:pos + i * o].reshape(i, o)
            pos += i * o
            out.append((w, v[pos:pos + o]))
            pos += o
        return out


@dataclass(frozen=True, eq=False)
class ModelParams:
    values: np.ndarray
    shape_tag: str

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 1:
            raise ContractError("parameter vector must be flat")
        if not np.all(np.isfinite(v)):
            raise ContractError("non-finite parameter")
        if len(v) != Architecture.from_tag(self.shape_tag).n_params:
            raise ContractError(f"length {len(v)} does not match {self.shape_tag}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def arch(self) -> Architecture:
        return Architecture.from_tag(self.shape_tag)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.shape_tag == other.shape_tag and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class ModelSnapshot:
    params: ModelParams
    last_update: float = 0
    n_train_samples: int = 0

    def __post_init__(self):
        if self.last_update < 0 or self.n_train_samples < 0:
            raise ContractError("last_update and n_train_samples must be non-negative")

    @property
    def weight(self) -> int:
        return max(self.n_train_samples, 1)


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 1
    l2: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0 or self.batch_size < 1 or self.epochs < 0 or self.l2 < 0:
            raise ContractError(f"invalid hyperparameters {self}")


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    loss: float


def init_model(arch: Architecture, rng) -> ModelParams:
    chunks = []
    for i, o in arch.layers:
        bound = 1.0 / np.sqrt(i)
        chunks.append(rng.uniform(-bound, bound, size=i * o))
        chunks.append(np.zeros(o))
    return ModelParams(np.concatenate(chunks), arch.shape_tag)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(arch: Architecture, v: np.ndarray, x: np.ndarray) -> np.ndarray:
    layers = arch.unpack(v)
    if arch.kind == "logistic":
        w, b = layers[0]
        return x @ w + b
    (w1, b1), (w2, b2) = layers
    return np.tanh(x @ w1 + b1) @ w2 + b2


def loss_and_grad(arch: Architecture, v: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float = 0.0):
    """Mean softmax cross-entropy plus ``l2/2 * ||weights||^2`` (biases unpenalised)."""
    n = len(y)
    grad = np.zeros_like(v, dtype=float)
    g_layers = arch.unpack(grad)
    layers = arch.unpack(v)
    if arch.kind == "logistic":
        (w, b), = layers
        logits = x @ w + b
        hidden = None
    else:
        (w1, b1), (w, b) = layers
        pre = x @ w1 + b1
        hidden = np.tanh(pre)
        logits = hidden @ w + b
    logp = _log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    inp = x if hidden is None else hidden
    gw, gb = g_layers[-1]
    gw[...] = inp.T @ delta
    gb[...] = delta.sum(axis=0)
    if hidden is not None:
        dh = (delta @ w.T) * (1.0 - hidden ** 2)
        gw1, gb1 = g_layers[0]
        gw1[...] = x.T @ dh
        gb1[...] = dh.sum(axis=0)
    if l2:
        for (wl, _), (gwl, _) in zip(layers, g_layers):
            loss += 0.5 * l2 * float((wl ** 2).sum())
            gwl += l2 * wl
    return float(loss), grad


def _check_shape(params: ModelParams, ds) -> Architecture:
    arch = params.arch
    if ds.n_features != arch.n_features or ds.n_classes != arch.n_classes:
        raise ContractError(f"dataset ({ds.n_features} features, {ds.n_classes} classes) "
                            f"does not fit {params.shape_tag}")
    return arch


def train(params: ModelParams, ds, hyper: Hyperparams, rng) -> ModelParams:
    """Mini-batch SGD for ``hyper.epochs`` passes; returns new params."""
    arch = _check_shape(params, ds)
    n = len(ds)
    if n == 0 or hyper.epochs == 0:
        return params
    v = params.values.copy()
    x, y = ds.features, ds.labels
    bs, lr = hyper.batch_size, hyper.learning_rate
    for _ in range(hyper.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            _, g = loss_and_grad(arch, v, x[idx], y[idx], hyper.l2)
            v -= lr * g
    return ModelParams(v, params.shape_tag)


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(forward(params.arch, params.values, x), axis=1)


def evaluate(params: ModelParams, ds) -> Metrics:
    arch = _check_shape(params, ds)
    if len(ds) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    logits = forward(arch, params.values, ds.features)
    logp = _log_softmax(logits)
    acc = float(np.mean(np.argmax(logits, axis=1) == ds.labels))
    loss = float(-logp[np.arange(len(ds)), ds.labels].mean())
    return Metrics(acc, max(loss, 0.0))


def aggregate_weighted(snapshots: Sequence[ModelSnapshot]) -> ModelParams:
    """Sample-count weighted average of snapshot parameters.

    Inputs are put in a canonical order first, so the result does not depend
    on the order of ``snapshots``; the sum is written as an offset from the
    first vector so identical inputs reproduce it exactly, and the output is
    clipped to the coordinate-wise input range.
    """
    if not snapshots:
        raise ContractError("cannot aggregate an empty list")
    tag = snapshots[0].params.shape_tag
    if any(s.params.shape_tag != tag for s in snapshots):
        raise ContractError("snapshots have different shape tags")
    if len(snapshots) == 1:
        return snapshots[0].params
    ordered = sorted(snapshots, key=lambda s: (s.weight, s.params.values.tobytes()))
    total = float(sum(s.weight for s in ordered))
    base = ordered[0].params.values
    acc = np.zeros_like(base)
    for s in ordered[1:]:
        acc += (s.weight / total) * (s.params.values - base)
    out = base + acc
    stack = np.stack([s.params.values for s in ordered])
    out = np.clip(out, stack.min(axis=0), stack.max(axis=0))
    return ModelParams(out, tag)


def merge_snapshots(a: ModelSnapshot, b: ModelSnapshot) -> ModelSnapshot:
    """Pairwise aggregation; the result carries the newer timestamp and larger weight."""
    return ModelSnapshot(aggregate_weighted([a, b]), max(a.last_update, b.last_update),
                         max(a.n_train_samples, b.n_train_samples))


# --- checkpoint text format ----------------------------------------------


def save_checkpoint(snap: ModelSnapshot, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(snap.params.shape_tag + "\n")
        fh.write(f"{snap.last_update!r} {snap.n_train_samples}\n")
        fh.write(" ".join(repr(float(v)) for v in snap.params.values) + "\n")


def load_checkpoint(path) -> ModelSnapshot:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 3:
        raise ContractError("checkpoint needs three lines")
    tag = lines[0].strip()
    lu, n = lines[1].split()
    lu = float(lu)
    values = np.array([float(v) for v in lines[2].split()])
    return ModelSnapshot(ModelParams(values, tag), int(lu) if lu.is_integer() else lu, int(n))
