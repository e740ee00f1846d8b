"""Figure rendering for the report stage.

Figures are built on bare :class:`matplotlib.figure.Figure` objects (no
pyplot state) and saved as SVG with a fixed hash salt and no date stamp so
reruns produce identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .spectral import welch_psd

_RC = {"svg.hashsalt": "ssa-eeg", "svg.fonttype": "none", "font.size": 9}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None} if path.suffix == ".svg" else {}
    with matplotlib.rc_context(_RC):
        fig.savefig(path, metadata=meta)
    return path


def plot_variance(fractions: Sequence[float], path, retained: int | None = None,
                  title: str = "Variance explained by SSA components") -> Path:
    frac = np.asarray(fractions, dtype=np.float64)
    idx = np.arange(1, frac.size + 1)
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(6, 3.2), layout="constrained")
        ax = fig.add_subplot()
        ax.semilogy(idx, frac, "o-", ms=3, lw=1, label="per component")
        ax.set_xlabel("component")
        ax.set_ylabel("fraction of variance")
        if retained:
            ax.axvline(retained + 0.5, color="0.5", ls="--", lw=0.8, label=f"retained ({retained})")
        ax2 = ax.twinx()
        ax2.plot(idx, np.cumsum(frac), color="C1", lw=1, label="cumulative")
        ax2.set_ylim(0, 1.02)
        ax2.set_ylabel("cumulative")
        lines = ax.get_legend_handles_labels()
        lines2 = ax2.get_legend_handles_labels()
        ax.legend(lines[0] + lines2[0], lines[1] + lines2[1], loc="center right", frameon=False)
        ax.set_title(title)
    return _save(fig, path)


def plot_sweep(rows: Sequence[dict], path) -> Path:
    """Accuracy, sensitivity and specificity against ensemble size."""
    k = [int(r["members"]) for r in rows]
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5, 3.2), layout="constrained")
        ax = fig.add_subplot()
        for key, marker in (("accuracy", "o"), ("sensitivity", "s"), ("specificity", "^")):
            ax.plot(k, [float(r[key]) for r in rows], marker=marker, label=key)
        ax.set_xticks(k)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("grouped components (ensemble members)")
        ax.set_ylabel("score")
        ax.legend(frameon=False, loc="lower left")
        ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_matrices(mean_by_class: dict, path) -> Path:
    """Grid of class-mean channel-correlation matrices, one column per group."""
    classes = list(mean_by_class)
    G = next(iter(mean_by_class.values())).shape[0]
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(2.1 * G + 0.8, 2.1 * len(classes)), layout="constrained")
        axes = fig.subplots(len(classes), G, squeeze=False)
        im = None
        for r, cls in enumerate(classes):
            for g in range(G):
                ax = axes[r, g]
                im = ax.imshow(mean_by_class[cls][g], vmin=-1, vmax=1, cmap="RdBu_r")
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(f"group {g + 1}")
                if g == 0:
                    ax.set_ylabel(cls)
        fig.colorbar(im, ax=axes, shrink=0.8, label="Pearson r")
    return _save(fig, path)


def plot_components(x: np.ndarray, grouped: np.ndarray, fs: float, path,
                    seconds: float = 4.0) -> Path:
    """One channel: raw trace, grouped components and their PSDs."""
    n = min(x.size, int(seconds * fs))
    t = np.arange(n) / fs
    G = grouped.shape[0]
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(8, 1.3 * (G + 1)), layout="constrained")
        axes = fig.subplots(G + 1, 2, squeeze=False, width_ratios=(3, 1))
        series = [("signal", x)] + [(f"group {g + 1}", grouped[g]) for g in range(G)]
        for row, (name, y) in enumerate(series):
            axes[row, 0].plot(t, y[:n], lw=0.6)
            axes[row, 0].set_ylabel(name)
            psd = welch_psd([y], fs).band(0.0, 45.0)
            axes[row, 1].semilogy(psd.freqs, psd.power + 1e-20, lw=0.6)
            if row < G:
                axes[row, 0].set_xticklabels([])
                axes[row, 1].set_xticklabels([])
        axes[-1, 0].set_xlabel("time (s)")
        axes[-1, 1].set_xlabel("Hz")
    return _save(fig, path)
