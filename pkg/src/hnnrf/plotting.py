"""PNG renderings of the report data (coverage curves, loss curves, DSC spread)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def coverage_figure(curves: dict[str, list[tuple[float, float]]], path) -> Path:
    """Fraction of cases at or above each DSC level, one line per method."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, curve in curves.items():
        levels = [c[0] for c in curve]
        frac = [c[1] for c in curve]
        ax.step(levels, frac, where="post", label=name)
    ax.set_xlabel("DSC")
    ax.set_ylabel("fraction of cases >= DSC")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    return _save(fig, path)


def loss_figure(curves: dict[str, list[float]], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, losses in curves.items():
        ax.plot(range(1, len(losses) + 1), losses, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss per pixel")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    return _save(fig, path)


def dsc_boxplot(values: dict[str, list[float]], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    names = list(values)
    ax.boxplot([values[n] for n in names])
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylabel("DSC")
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)
