"""Figures for capacity-level reports."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_costs(rows: Sequence[dict], path: str) -> str:
    """Bar charts of params, FLOPs and MB per capacity level."""
    levels = [r["level"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    panels = [("params", 1e6, "parameters (M)"), ("flops", 1e6, "FLOPs (M)"), ("mb", 1.0, "size (MB)")]
    for ax, (key, div, label) in zip(axes, panels):
        vals = [r[key] / div for r in rows]
        bars = ax.bar([str(l) for l in levels], vals, color="#4c72b0")
        ax.bar_label(bars, fmt="%.3g", fontsize=7)
        ax.set_xlabel("level")
        ax.set_ylabel(label)
        ax.margins(y=0.15)
    fig.suptitle("cost per capacity level (0 = full model)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_widths(widths: Sequence[dict[str, int]], path: str) -> str:
    """Channel width of every pruned group across levels."""
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    names = list(widths[0]) if widths else []
    for name in names:
        ax.plot(range(len(widths)), [w[name] for w in widths], marker="o", label=name)
    ax.set_xlabel("level")
    ax.set_ylabel("channels")
    ax.set_xticks(range(len(widths)))
    if names and len(names) <= 12:
        ax.legend(fontsize=7, loc="upper right")
    ax.set_title("group widths per level")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_report(rows: Sequence[dict], widths: Sequence[dict[str, int]], outdir: str) -> list[str]:
    """Write the report figures into ``outdir`` and return their paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = [plot_costs(rows, os.path.join(outdir, "costs.png"))]
    if widths and widths[0]:
        paths.append(plot_widths(widths, os.path.join(outdir, "widths.png")))
    return paths
