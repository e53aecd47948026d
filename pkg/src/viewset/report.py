"""Figure rendering for the reporting commands.

Matplotlib is imported lazily and driven through the Agg backend so the
library itself never needs a display; figures are written next to the
delimited text outputs they illustrate.
"""

from __future__ import annotations

import numpy as np


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_attention_figure(maps: list[np.ndarray], path, title: str) -> None:
    """One heatmap per block of the head-averaged view-to-view attention."""
    plt = _pyplot()
    n = len(maps)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.0), squeeze=False)
    for i, (ax, m) in enumerate(zip(axes[0], maps)):
        im = ax.imshow(m, cmap="viridis", vmin=0.0, vmax=max(1e-9, m.max()))
        ax.set_title(f"block {i}")
        ax.set_xlabel("key view")
        if i == 0:
            ax.set_ylabel("query view")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_metrics_figure(micro: dict[str, float], macro: dict[str, float],
                          path) -> None:
    """Grouped bars of the micro / macro retrieval metric battery."""
    plt = _pyplot()
    names = list(micro)
    x = np.arange(len(names))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    ax.bar(x - width / 2, [micro[n] for n in names], width, label="micro")
    ax.bar(x + width / 2, [macro[n] for n in names], width, label="macro")
    display = {"p_at_n": "P@N", "r_at_n": "R@N", "f1_at_n": "F1@N",
               "map": "mAP", "ndcg": "NDCG"}
    ax.set_xticks(x)
    ax.set_xticklabels([display.get(n, n) for n in names])
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
