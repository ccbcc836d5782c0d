"""Chart emission for run comparisons (self-contained SVG output)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

_PANELS = [
    ("loss", "train loss"),
    ("weight_l2", "weight $\\ell_2$ norm"),
    ("momentum_l2_pos", "momentum $\\ell_2$ norm (positive weights)"),
]


def render_comparison(runs: dict, out_path) -> Path:
    """Line charts of loss / weight norm / momentum norm vs step, one line per
    run, written as a single vector-graphics file."""
    out_path = Path(out_path)
    fig, axes = plt.subplots(1, len(_PANELS), figsize=(5 * len(_PANELS), 3.6))
    for ax, (col, label) in zip(axes, _PANELS):
        for name, table in runs.items():
            ax.plot(table["step"], table[col], label=name, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format=out_path.suffix.lstrip("."))
    plt.close(fig)
    return out_path
