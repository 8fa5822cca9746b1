"""Figure rendering for the report path.

Sweeps emit a PNG next to each CSV: decay quantities on a log scale with
their fitted line and the certified-rate reference slope.  Headless backend;
figures are a convenience layer, the CSV stays the primary output.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

_STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 130,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.labelsize": 10,
    "font.size": 9,
    "legend.fontsize": 8,
}


def decay_figure(path, rows, keys, kappa: float, title: str) -> str:
    """Semilog decay plot for the given row keys vs the horizon T."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    ts = np.array([r["T"] for r in rows])
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for key in keys:
            ys = np.array([r[key] for r in rows])
            pos = ys > 0
            ax.semilogy(ts[pos], ys[pos], "o-", label=key)
        ref = np.exp(-0.5 * kappa * (ts - ts[0]))
        scale = max((r[keys[0]] for r in rows if r[keys[0]] > 0), default=1.0)
        ax.semilogy(ts, scale * ref, "k--", lw=1,
                    label=f"slope -kappa/2 (kappa={kappa:.3g})")
        ax.set_xlabel("horizon T")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return str(path)


def contraction_figure(path, results, kappa: float) -> str:
    """Contraction ratios against the exponential bound per evaluation time."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    ts = sorted({r["t"] for r in results})
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for r in results:
            ax.semilogy(r["t"], r["ratio_m"], "o", color="tab:blue", ms=4)
            ax.semilogy(r["t"], r["ratio_n"], "s", color="tab:orange", ms=4)
        tline = np.linspace(min(ts), max(ts), 64)
        ax.semilogy(tline, np.exp(-kappa * tline) * (1 + 1e-3), "k--", lw=1,
                    label="exp(-kappa t) bound")
        ax.plot([], [], "o", color="tab:blue", label="forward / M-norm")
        ax.plot([], [], "s", color="tab:orange", label="adjoint / N-norm")
        ax.set_xlabel("t")
        ax.set_ylabel("W2 ratio")
        ax.set_title("semigroup contraction in twisted norms")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return str(path)


def diagnostics_figure(path, diag) -> str:
    """Entropy/Fisher and corrector profiles along one bridge flow."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
        axes[0].plot(diag.times, diag.H, label="H")
        axes[0].plot(diag.times, diag.I, label="I")
        axes[0].set_yscale("log")
        axes[0].set_xlabel("t")
        axes[0].set_title("distance from equilibrium")
        axes[0].legend()
        axes[1].plot(diag.times, diag.phi, label="phi")
        axes[1].plot(diag.times, diag.psi, label="psi")
        axes[1].set_yscale("log")
        axes[1].set_xlabel("t")
        axes[1].set_title("correctors")
        axes[1].legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return str(path)
