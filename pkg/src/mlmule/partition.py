"""Synthetic labeled data and the partitioners that spread it over devices."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ValidationError

DIRICHLET_RETRIES = 100


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    class_hierarchy: dict[int, int] | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ContractError("features must be 2-D and labels 1-D")
        if len(self.features) != len(self.labels):
            raise ContractError("features and labels have different sample counts")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError("label outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes, self.class_hierarchy)

    def append(self, x, y) -> LabeledDataset:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        return LabeledDataset(np.vstack([self.features, x]), np.concatenate([self.labels, y]),
                              self.n_classes, self.class_hierarchy)

    def concat(self, other: LabeledDataset) -> LabeledDataset:
        return self.append(other.features, other.labels)

    @classmethod
    def empty(cls, n_features: int, n_classes: int, hierarchy=None) -> LabeledDataset:
        return cls(np.zeros((0, n_features)), np.zeros(0, dtype=np.int64), n_classes, hierarchy)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class SynthSpec:
    n_superclasses: int = 2
    n_subclasses: int = 5
    samples_per_subclass: int = 500
    n_features: int = 8
    sigma: float = 0.4
    pitch: float = 1.0


@dataclass
class PartitionAssignment:
    """Owner -> sample indices. ``pooled`` holds indices kept aside (by superclass)."""

    parts: dict[Hashable, np.ndarray]
    pooled: dict[int, np.ndarray] = field(default_factory=dict)

    def all_indices(self) -> np.ndarray:
        chunks = list(self.parts.values()) + list(self.pooled.values())
        if not chunks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(chunks)

    def sizes(self) -> dict[Hashable, int]:
        return {k: len(v) for k, v in self.parts.items()}


def _grid_means(k: int, d: int, pitch: float, rng) -> np.ndarray:
    g = max(2, math.ceil(k ** (1.0 / d) - 1e-9))
    chosen: list[tuple[int, ...]] = []
    seen = set()
    if g ** d <= 1 << 20:
        for code in rng.choice(g ** d, size=k, replace=False):
            digits = []
            for _ in range(d):
                code, r = divmod(int(code), g)
                digits.append(r)
            chosen.append(tuple(digits))
    else:
        while len(chosen) < k:
            pt = tuple(int(v) for v in rng.integers(0, g, size=d))
            if pt not in seen:
                seen.add(pt)
                chosen.append(pt)
    means = np.array(chosen, dtype=float) * pitch
    return means - means.mean(axis=0)


def synth_dataset(spec: SynthSpec, rng) -> LabeledDataset:
    """Gaussian cluster per subclass with means on a grid of pitch ``spec.pitch``.

    Labels are subclass indices ``s * C + c``; the hierarchy maps each to ``s``.
    """
    if spec.n_features < 2:
        raise ConfigError("n_features must be >= 2", key="n_features")
    if not spec.sigma > 0:
        raise ConfigError("sigma must be positive", key="sigma")
    if spec.n_superclasses < 1 or spec.n_subclasses < 1 or spec.samples_per_subclass < 1:
        raise ConfigError("class counts and samples_per_subclass must be >= 1")
    k = spec.n_superclasses * spec.n_subclasses
    means = _grid_means(k, spec.n_features, spec.pitch, rng)
    n = spec.samples_per_subclass
    labels = np.repeat(np.arange(k), n)
    x = means[labels] + spec.sigma * rng.standard_normal((k * n, spec.n_features))
    hierarchy = {c: c // spec.n_subclasses for c in range(k)}
    return LabeledDataset(x, labels, k, hierarchy)


def class_means(ds: LabeledDataset) -> np.ndarray:
    return np.array([ds.features[ds.labels == c].mean(axis=0) for c in range(ds.n_classes)])


def partition_iid(ds: LabeledDataset, owners: Sequence[Hashable], rng) -> PartitionAssignment:
    if len(owners) < 1:
        raise ContractError("need at least one owner")
    perm = rng.permutation(len(ds))
    return PartitionAssignment({o: np.sort(c) for o, c in zip(owners, np.array_split(perm, len(owners)))})


def _dirichlet_draw(ds, n_owners, alpha, rng) -> list[list[np.ndarray]]:
    per_owner: list[list[np.ndarray]] = [[] for _ in range(n_owners)]
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        if not len(idx):
            continue
        idx = rng.permutation(idx)
        p = rng.dirichlet(np.full(n_owners, alpha))
        counts = rng.multinomial(len(idx), p)
        for o, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            per_owner[o].append(chunk)
    return per_owner


def partition_dirichlet(ds: LabeledDataset, owners: Sequence[Hashable], alpha: float, rng) -> PartitionAssignment:
    """Per-class Dirichlet(alpha) proportions over owners; smaller alpha concentrates more.

    Draws that leave an owner empty are redrawn; after ``DIRICHLET_RETRIES``
    failures one sample is moved from the largest owner to each empty one.
    """
    if not alpha > 0:
        raise ConfigError("alpha must be positive", key="alpha")
    if len(owners) < 1:
        raise ContractError("need at least one owner")
    n_owners = len(owners)
    for _ in range(DIRICHLET_RETRIES):
        draw = _dirichlet_draw(ds, n_owners, alpha, rng)
        parts = [np.sort(np.concatenate(ch)) if ch else np.zeros(0, np.int64) for ch in draw]
        if all(len(p) for p in parts):
            break
    else:
        for o in range(n_owners):
            if not len(parts[o]):
                big = max(range(n_owners), key=lambda j: (len(parts[j]), -j))
                if len(parts[big]) < 2:
                    break
                parts[o] = parts[big][-1:]
                parts[big] = parts[big][:-1]
    return PartitionAssignment({o: p.astype(np.int64) for o, p in zip(owners, parts)})


def partition_shards(ds: LabeledDataset, world, rng) -> PartitionAssignment:
    """Superclasses split across areas; subclass j of each goes to space j of its area.

    Subclasses with index >= spaces-per-area are pooled per superclass as
    general knowledge for seeding mobile devices.
    """
    if ds.class_hierarchy is None:
        raise ConfigError("shards partition needs a class hierarchy", key="scheme")
    areas = world.areas
    supers = sorted(set(ds.class_hierarchy.values()))
    if len(supers) % len(areas):
        raise ConfigError(f"{len(supers)} superclasses cannot be split evenly over {len(areas)} areas",
                          key="n_superclasses")
    subs_of = {s: sorted(c for c, p in ds.class_hierarchy.items() if p == s) for s in supers}
    per_area = len(supers) // len(areas)
    parts: dict[Hashable, list] = {sp.id: [] for a in areas for sp in a.spaces}
    pooled: dict[int, list] = {}
    for ai, area in enumerate(areas):
        n_spaces = len(area.spaces)
        for s in supers[ai * per_area:(ai + 1) * per_area]:
            subs = subs_of[s]
            if len(subs) < n_spaces + 1:
                raise ConfigError(f"superclass {s} has {len(subs)} subclasses, need {n_spaces + 1}",
                                  key="n_subclasses")
            for j, space in enumerate(area.spaces):
                parts[space.id].append(np.flatnonzero(ds.labels == subs[j]))
            pooled[s] = [np.flatnonzero(ds.labels == c) for c in subs[n_spaces:]]
    cat = lambda ch: rng.permutation(np.concatenate(ch)).astype(np.int64) if ch else np.zeros(0, np.int64)
    return PartitionAssignment({k: cat(v) for k, v in parts.items()}, {s: cat(v) for s, v in pooled.items()})


def seed_mobile_data(ds: LabeledDataset, assignment: PartitionAssignment, home_space: int,
                     n_local: int, n_general: int, rng, exclude=()) -> np.ndarray:
    """Indices for a mobile device: ``n_local`` from its home space plus
    ``n_general`` from the pooled subclasses of the same superclass(es).

    Draws are without replacement and skip anything in ``exclude``, so
    successive devices can be given disjoint data.
    """
    taken = np.fromiter(exclude, dtype=np.int64) if not isinstance(exclude, np.ndarray) else exclude
    local_pool = np.setdiff1d(assignment.parts[home_space], taken)
    supers = {ds.class_hierarchy[int(c)] for c in np.unique(ds.labels[assignment.parts[home_space]])}
    gen_chunks = [assignment.pooled[s] for s in sorted(supers) if s in assignment.pooled]
    gen_pool = np.setdiff1d(np.concatenate(gen_chunks), taken) if gen_chunks else np.zeros(0, np.int64)
    if n_local > len(local_pool) or n_general > len(gen_pool):
        raise ConfigError(f"space {home_space} cannot supply {n_local}+{n_general} samples "
                          f"(have {len(local_pool)}+{len(gen_pool)})", key="n_local")
    local = rng.choice(local_pool, size=n_local, replace=False)
    general = rng.choice(gen_pool, size=n_general, replace=False)
    return np.concatenate([local, general]).astype(np.int64)


def split_indices(labels: np.ndarray, test_frac: float, rng, allow_singletons: bool = False):
    """Stratified split of positions ``0..len(labels)-1`` into (train, test)."""
    if not 0 < test_frac < 1:
        raise ContractError("test_frac must lie in (0, 1)")
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) < 2:
            if not allow_singletons:
                raise ValidationError(f"class {c} has fewer than 2 samples")
            train.append(idx)
            continue
        k = min(max(int(round(len(idx) * test_frac)), 1), len(idx) - 1)
        test.append(idx[:k])
        train.append(idx[k:])
    cat = lambda ch: np.sort(np.concatenate(ch)) if ch else np.zeros(0, np.int64)
    return cat(train), cat(test)


def train_test_split(ds: LabeledDataset, test_frac: float, rng, allow_singletons: bool = False):
    tr, te = split_indices(ds.labels, test_frac, rng, allow_singletons)
    return ds.subset(tr), ds.subset(te)


def label_entropy(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float((p * np.log(1.0 / p)).sum())


def count_table(ds: LabeledDataset, assignment: PartitionAssignment) -> dict[Hashable, np.ndarray]:
    return {o: np.bincount(ds.labels[idx], minlength=ds.n_classes) for o, idx in assignment.parts.items()}


# --- text format: label,f1,...,fd ----------------------------------------


def save_dataset(ds: LabeledDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for y, row in zip(ds.labels, ds.features):
            fh.write(",".join([str(int(y))] + [repr(float(v)) for v in row]) + "\n")


def load_dataset(path, n_classes: int | None = None, hierarchy=None) -> LabeledDataset:
    labels, feats = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            try:
                labels.append(int(parts[0]))
                feats.append([float(v) for v in parts[1:]])
            except ValueError:
                raise ValidationError(f"line {lineno}: malformed sample") from None
            if len(feats[-1]) != len(feats[0]):
                raise ValidationError(f"line {lineno}: expected {len(feats[0])} features")
    if not labels:
        raise ValidationError("dataset file is empty")
    y = np.array(labels, dtype=np.int64)
    k = n_classes if n_classes is not None else int(y.max()) + 1
    return LabeledDataset(np.array(feats, dtype=float), y, k, hierarchy)
