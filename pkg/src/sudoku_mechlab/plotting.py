"""Deterministic SVG figures for the report files."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp so reruns give identical bytes
STYLE = {
    "svg.hashsalt": "sudoku-mechlab",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.titlesize": 10,
    "figure.dpi": 100,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def grid_heatmap(values: np.ndarray, path: str | Path, title: str = "", cmap: str = "viridis",
                 center: bool = False) -> Path:
    """9x9 heatmap with box boundaries drawn."""
    values = np.asarray(values, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        kw = {}
        if center:
            lim = float(np.nanmax(np.abs(values))) or 1.0
            kw = {"vmin": -lim, "vmax": lim}
        im = ax.imshow(values, cmap=cmap, **kw)
        for k in (2.5, 5.5):
            ax.axhline(k, color="white", lw=1.2)
            ax.axvline(k, color="white", lw=1.2)
        ax.set_xticks(range(9), [str(i) for i in range(1, 10)])
        ax.set_yticks(range(9), [str(i) for i in range(1, 10)])
        ax.set_xlabel("column")
        ax.set_ylabel("row")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
        return _save(fig, path)


def grid_pair(left: np.ndarray, right: np.ndarray, path: str | Path, titles: Sequence[str] = ("present", "absent"),
              suptitle: str = "") -> Path:
    """Two 9x9 panels on a shared symmetric color scale."""
    both = np.concatenate([np.ravel(left), np.ravel(right)])
    lim = float(np.nanmax(np.abs(both))) if np.isfinite(both).any() else 1.0
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6.4, 3.0))
        for ax, vals, t in zip(axes, (left, right), titles):
            im = ax.imshow(np.asarray(vals, dtype=float), cmap="RdBu_r", vmin=-lim or -1, vmax=lim or 1)
            for k in (2.5, 5.5):
                ax.axhline(k, color="k", lw=0.8)
                ax.axvline(k, color="k", lw=0.8)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_title(t)
        fig.colorbar(im, ax=list(axes), fraction=0.03)
        fig.suptitle(suptitle)
        return _save(fig, path)


def line_plot(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], path: str | Path,
              xlabel: str = "", ylabel: str = "", title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.2))
        for name, (x, y) in series.items():
            ax.plot(list(x), list(y), marker="o", ms=3, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if len(series) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def histogram(values: Sequence[float], path: str | Path, bins: int = 40, xlabel: str = "", title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.4, 3.0))
        ax.hist(np.asarray(values, dtype=float), bins=bins, color="0.35")
        ax.axvline(0.0, color="tab:red", lw=0.8)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("count")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def matrix(values: np.ndarray, path: str | Path, title: str = "", labels: Sequence[str] | None = None) -> Path:
    values = np.asarray(values, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 4.0))
        im = ax.imshow(values, cmap="magma")
        if labels is not None:
            ax.set_xticks(range(len(labels)), labels, rotation=90)
            ax.set_yticks(range(len(labels)), labels)
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
        return _save(fig, path)
