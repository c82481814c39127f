"""Figures written next to the CSV/JSON reports (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from mdnf.defenses import ShapingCurve  # noqa: E402
from mdnf.dsp import DspConfig, build_mel_filterbank  # noqa: E402

DEFENSE_ORDER = ("none", "randomized_smoothing", "mel_resynth", "mdnf-unshaped", "mdnf")
STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_shaping_curve(curve: ShapingCurve, path, dsp: DspConfig | None = None) -> Path:
    """Per-bin weights; against filter centre frequency when ``dsp`` is given."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        if dsp is not None:
            x = build_mel_filterbank(dsp).bin_centers_hz
            ax.set_xlabel("filter centre (Hz)")
        else:
            x = np.arange(len(curve))
            ax.set_xlabel("mel bin")
        ax.plot(x, curve.weights, lw=1.4, color="C3")
        ax.axhline(1.0, color="0.5", lw=0.8, ls="--")
        ax.set_ylabel("relative perturbation strength")
        ax.set_ylim(bottom=0)
        return _save(fig, path)


def plot_wer_matrix(rows: Sequence[dict], path) -> Path:
    """Grouped bars: one group per attack budget, one bar per defense.

    ``rows`` are aggregate rows (``EvalReport.aggregate_row`` or a re-read CSV).
    """
    budgets = list(dict.fromkeys(r["budget"] for r in rows))
    seen = {r["defense"] for r in rows}
    defenses = [d for d in DEFENSE_ORDER if d in seen] + sorted(seen - set(DEFENSE_ORDER))
    table = {(r["defense"], r["budget"]): r["mean_wer"] for r in rows}
    width = 0.8 / max(len(defenses), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(5.0, 0.9 * len(budgets) + 2), 3.2))
        x = np.arange(len(budgets))
        for i, d in enumerate(defenses):
            vals = [table.get((d, b), np.nan) for b in budgets]
            ax.bar(x + (i - (len(defenses) - 1) / 2) * width, vals, width, label=d)
        ax.set_xticks(x)
        ax.set_xticklabels(budgets, rotation=30, ha="right")
        ax.set_ylabel("WER (%)")
        ax.legend(frameon=False, fontsize=7, ncol=2)
        return _save(fig, path)


def plot_gl_trajectory(trajectory: Sequence[float], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        ax.semilogy(np.arange(len(trajectory)), trajectory, marker=".", lw=1)
        ax.set_xlabel("Griffin-Lim iteration")
        ax.set_ylabel("magnitude mismatch")
        return _save(fig, path)


def plot_mel_pair(before: np.ndarray, after: np.ndarray, path, titles=("input", "re-synthesised")) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 2.8), sharey=True)
        lo = min(before.min(), after.min())
        hi = max(before.max(), after.max())
        for ax, m, t in zip(axes, (before, after), titles):
            ax.imshow(m.T, origin="lower", aspect="auto", vmin=max(lo, hi - 20), vmax=hi, cmap="magma")
            ax.set_title(t)
            ax.set_xlabel("frame")
            ax.grid(False)
        axes[0].set_ylabel("mel bin")
        return _save(fig, path)
