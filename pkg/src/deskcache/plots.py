"""SVG figures. Output is byte-stable across runs (fixed hash salt, no date stamp)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path):
    with matplotlib.rc_context({"svg.hashsalt": "deskcache", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def similarity_heatmap(sim: np.ndarray, path: str | Path, title: str = "feature similarity") -> None:
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(sim, cmap="viridis", vmin=min(0.0, float(sim.min())), vmax=1.0, origin="upper")
    ax.set_xlabel("step")
    ax.set_ylabel("step")
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save(fig, path)


def line_chart(xs: Sequence[float], series: dict[str, Sequence[float]], path: str | Path,
               xlabel: str, ylabel: str, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    _save(fig, path)
