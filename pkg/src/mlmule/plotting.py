"""File-only figures for the CLI report paths (Agg backend, no display)."""
from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_curves(rows, path, column: str = "smoothed", title: str = "") -> None:
    """Accuracy over time, one line per (method, mobility) from tidy compare rows."""
    series = defaultdict(list)
    for r in rows:
        series[(r["method"], r["p_cross"])].append((int(r["t"]), float(r[column])))
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for (method, mob), pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=f"{method} ({mob})", lw=1.4)
    ax.set_xlabel("time step")
    ax.set_ylabel("post-local accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    if series:
        ax.legend(fontsize=8, frameon=False)
    _save(fig, path)


def plot_partition(owners, counts: np.ndarray, path, title: str = "") -> None:
    """Stacked per-owner class counts, in the style of a data-distribution chart."""
    counts = np.asarray(counts)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    x = np.arange(len(owners))
    bottom = np.zeros(len(owners))
    cmap = plt.get_cmap("tab20")
    for k in range(counts.shape[1] if counts.ndim == 2 else 0):
        ax.bar(x, counts[:, k], bottom=bottom, color=cmap(k % 20), width=0.8, label=f"class {k}")
        bottom += counts[:, k]
    ax.set_xticks(x, [str(o) for o in owners])
    ax.set_xlabel("owner")
    ax.set_ylabel("samples")
    if title:
        ax.set_title(title)
    if counts.ndim == 2 and counts.shape[1] <= 20:
        ax.legend(fontsize=7, frameon=False, loc="upper left", bbox_to_anchor=(1.01, 1.0))
    _save(fig, path)
