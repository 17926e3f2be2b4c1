"""Matplotlib figures for run reports. Every function writes one file and returns its path."""

from __future__ import annotations

import os
from collections.abc import Mapping, Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LEVEL_COLORS = {"program": "#4c72b0", "optimizer": "#dd8452", "meta": "#55a868"}


def _finish(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_results(rows: Sequence[Mapping], path: str | os.PathLike) -> Path:
    """Grouped bars of mean val/test score per (method, benchmark), with std error bars."""
    labels = [f"{r['method']}\n{r['benchmark']}" for r in rows]
    xs = range(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(4.0, 1.3 * len(rows) + 1.5), 3.6))
    for offset, split, color in ((-width / 2, "val", "#8da0cb"), (width / 2, "test", "#fc8d62")):
        means = [r.get(f"{split}_mean") for r in rows]
        stds = [r.get(f"{split}_std") or 0.0 for r in rows]
        present = [(x, m, s) for x, m, s in zip(xs, means, stds) if m is not None]
        if present:
            ax.bar([x + offset for x, _, _ in present], [m for _, m, _ in present], width,
                   yerr=[s for _, _, s in present], capsize=3, label=split, color=color)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False)
    return _finish(fig, path)


def plot_cost(levels: Mapping[str, int], path: str | os.PathLike) -> Path:
    names = [k for k in ("program", "optimizer", "meta") if k in levels]
    values = [max(levels[k], 0) for k in names]
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    ax.bar(names, values, color=[LEVEL_COLORS[k] for k in names])
    if any(v > 0 for v in values):
        ax.set_yscale("log")
    ax.set_ylabel("tokens")
    ax.set_title("token usage by level", fontsize=10)
    return _finish(fig, path)


def plot_trajectories(trajectories: Mapping[str, Sequence[tuple[int, float]]], path: str | os.PathLike) -> Path:
    """Best-so-far score against inner iteration, one line per labelled run."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for label, points in trajectories.items():
        if points:
            ax.step([p[0] for p in points], [p[1] for p in points], where="post", label=label, marker="o", ms=3)
    ax.set_xlabel("inner iteration")
    ax.set_ylabel("best validation score")
    ax.set_ylim(-0.02, 1.02)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False, fontsize=7)
    return _finish(fig, path)
