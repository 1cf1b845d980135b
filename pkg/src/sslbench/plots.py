"""Static figures for the analysis outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def improvement_bars(rows: Sequence, title: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(rows) + 2), 3.5))
    if rows:
        labels = [f"{r.new}\n{r.task[:4]}" for r in rows]
        vals = [r.percent for r in rows]
        ax.bar(range(len(rows)), vals, color=["tab:green" if v > 0 else "tab:red" for v in vals])
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=60, fontsize=7)
    ax.axhline(0, color="k", lw=0.8)
    ax.set_ylabel("% improvement")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def ranking_radar(ranks: dict[str, list[str]], path: Path) -> None:
    """One polygon per model; radius grows with rank quality."""
    tasks = sorted(ranks)
    models = sorted({m for v in ranks.values() for m in v})
    fig = plt.figure(figsize=(6, 6))
    ax = fig.add_subplot(111, polar=True)
    if tasks and models:
        angles = np.linspace(0, 2 * np.pi, len(tasks), endpoint=False).tolist()
        angles.append(angles[0])
        for m in models:
            radii = []
            for t in tasks:
                order = ranks[t]
                radii.append(len(order) - order.index(m) if m in order else 0)
            radii.append(radii[0])
            ax.plot(angles, radii, lw=1, label=m)
        ax.set_xticks(angles[:-1])
        ax.set_xticklabels(tasks)
        ax.legend(loc="upper right", bbox_to_anchor=(1.35, 1.1), fontsize=6)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
