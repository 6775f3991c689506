"""Report figures: per-AU F1 bars and cross-domain heatmaps (PNG, Agg backend)."""

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport  # noqa: E402

# no timestamps or version strings, so the same report always gives the same bytes
_PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_per_au_f1(report: EvalReport, path):
    names = list(report.au_names)
    values = [report.per_au_f1[au] for au in names]
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * len(names), 3.2))
    heights = [0.0 if v is None else v for v in values]
    colors = ["#9e9e9e" if v is None else "#3b6ea8" for v in values]
    ax.bar(names, heights, color=colors)
    ax.axhline(report.macro_f1, color="#c0392b", linestyle="--", linewidth=1,
               label=f"Macro-F1 {report.macro_f1:.3f}")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("F1")
    title = report.label or report.protocol
    ax.set_title(f"{title} ({report.aggregation})", fontsize=9)
    ax.legend(loc="lower right", fontsize=8)
    ax.tick_params(axis="x", labelsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_crossdomain_heatmap(reports: Sequence[EvalReport], path):
    """Rows are train -> test directions, columns are AUs plus the macro average."""
    if not reports:
        raise ValueError("no reports to plot")
    names = list(reports[0].au_names)
    rows, labels = [], []
    for r in reports:
        if list(r.au_names) != names:
            raise ValueError("reports disagree on AU ordering")
        rows.append([np.nan if r.per_au_f1[a] is None else r.per_au_f1[a] for a in names] + [r.macro_f1])
        src, tgt = r.domains.get("source", "?"), r.domains.get("target", "?")
        labels.append(f"{src} -> {tgt}" + (f" [{r.label}]" if r.label else ""))
    grid = np.array(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(1.5 + 0.7 * grid.shape[1], 1.2 + 0.45 * grid.shape[0]))
    im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis", aspect="auto")
    ax.set_xticks(range(grid.shape[1]), names + ["Avg."], fontsize=8)
    ax.set_yticks(range(grid.shape[0]), labels, fontsize=8)
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center", fontsize=7,
                        color="white" if grid[i, j] < 0.5 else "black")
    fig.colorbar(im, ax=ax, fraction=0.04)
    fig.tight_layout()
    return _save(fig, path)


def render_plots(report: EvalReport, out_dir):
    """Per-AU bar chart, plus the heatmap for cross-domain reports; returns the paths."""
    out_dir = Path(out_dir)
    paths = [plot_per_au_f1(report, out_dir / "per_au_f1.png")]
    if report.protocol == "crossdomain":
        paths.append(plot_crossdomain_heatmap([report], out_dir / "crossdomain_heatmap.png"))
    return paths
