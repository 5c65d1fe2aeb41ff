"""Metric rows, CSV I/O and the small time-series helpers used for reports."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .protocol import CycleReport

HEADER = ("t", "round", "entity", "pre_acc", "post_acc", "loss", "exchanges", "method", "seed")


@dataclass(frozen=True)
class MetricsRow:
    t: int
    round: int
    entity: str
    pre_acc: float
    post_acc: float
    loss: float
    exchanges: int
    method: str
    seed: int

    def as_fields(self) -> list[str]:
        return [str(self.t), str(self.round), self.entity, f"{self.pre_acc:.6f}", f"{self.post_acc:.6f}",
                f"{self.loss:.6f}", str(self.exchanges), self.method, str(self.seed)]


@dataclass
class MetricsLog:
    rows: list[MetricsRow] = field(default_factory=list)
    cycles: list[CycleReport] = field(default_factory=list)
    stopped_early: bool = False

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADER)
            for r in self.rows:
                w.writerow(r.as_fields())

    def write_cycles_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t", "mule", "fixed", "mode", "accepted", "T_before", "T_after"))
            for c in self.cycles:
                w.writerow((c.t, c.mule, c.fixed, c.mode, int(c.accepted),
                            f"{c.threshold_before:.6f}", f"{c.threshold_after:.6f}"))

    def curve(self, column: str = "post_acc", every: int | None = None):
        return accuracy_curve(self.rows, column, every)

    def final(self, column: str = "post_acc") -> float:
        return final_accuracy(self.rows, column)


def read_csv(path) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRow(int(r["t"]), int(r["round"]), r["entity"], float(r["pre_acc"]),
                           float(r["post_acc"]), float(r["loss"]), int(r["exchanges"]), r["method"],
                           int(r["seed"])) for r in reader]


def accuracy_curve(rows, column: str = "post_acc", every: int | None = None):
    """Per-tick mean of ``column`` across entities -> (ticks, means).

    With ``every`` set, only ticks on that grid are kept, which puts runs
    with different round cadences on a common time axis.
    """
    acc = defaultdict(list)
    for r in rows:
        if every is None or r.t % every == 0:
            acc[r.t].append(getattr(r, column))
    ts = np.array(sorted(acc), dtype=np.int64)
    return ts, np.array([np.mean(acc[t]) for t in ts])


def final_accuracy(rows, column: str = "post_acc") -> float:
    ts, means = accuracy_curve(rows, column)
    if not len(ts):
        raise ValueError("no metric rows")
    return float(means[-1])


def moving_average(series, window: int = 100) -> np.ndarray:
    """Trailing mean over the last ``min(window, i + 1)`` points."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(series, dtype=float)
    if not len(x):
        return x
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(1, len(x) + 1)
    lo = np.maximum(i - window, 0)
    return (c[i] - c[lo]) / (i - lo)


def convergence_tick(ts, values, frac: float = 0.9):
    """First tick after which ``values`` stays at or above ``frac`` of its final value."""
    ts = np.asarray(ts)
    v = np.asarray(values, dtype=float)
    target = frac * v[-1]
    below = np.flatnonzero(v < target)
    if not len(below):
        return int(ts[0])
    return int(ts[below[-1] + 1])
