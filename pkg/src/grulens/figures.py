"""Heat-strip rendering of single-unit activation traces."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

from matplotlib import colors, rcParams
from matplotlib.figure import Figure

COLOR_SCALE = "linear"
CMAP = "coolwarm"  # red end = high activation

rcParams["svg.hashsalt"] = "grulens"
rcParams["svg.fonttype"] = "none"


def heat_strip(trace, path, vmin: float = -1.0, vmax: float = 1.0) -> None:
    """One colored cell per token; the scale is linear over [vmin, vmax]."""
    n = len(trace.tokens)
    fig = Figure(figsize=(max(2.0, 0.8 * n), 1.6))
    ax = fig.add_axes([0.02, 0.35, 0.85, 0.45])
    norm = colors.Normalize(vmin=vmin, vmax=vmax)
    im = ax.imshow(trace.activations[None, :], cmap=CMAP, norm=norm, aspect="auto")
    ax.set_xticks(range(n))
    ax.set_xticklabels(trace.tokens, fontsize=8)
    ax.set_yticks([])
    for i, v in enumerate(trace.activations):
        ax.text(i, 0, f"{v:.2f}", ha="center", va="center", fontsize=7)
    ax.set_title(f"{trace.sentence_id} unit {trace.unit}", fontsize=8)
    cax = fig.add_axes([0.89, 0.35, 0.02, 0.45])
    cb = fig.colorbar(im, cax=cax)
    cb.set_label(f"activation ({COLOR_SCALE} scale)", fontsize=7)
    cb.ax.tick_params(labelsize=6)
    fig.savefig(
        path,
        format="svg",
        metadata={"Date": None, "Description": f"color scale: {COLOR_SCALE}, {CMAP}, [{vmin}, {vmax}]"},
    )
