"""Log-log convergence figures rendered to files with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

golden_mean = (np.sqrt(5.0) - 1.0) / 2.0
fig_width = 6.0
params = {
    "font.family": "serif",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "mathtext.fontset": "stix",
    "lines.markersize": 3,
    "lines.linewidth": 1,
    "figure.figsize": (fig_width, fig_width * golden_mean),
    "figure.dpi": 150,
}


def _series(records, field):
    pts = [(r.N, getattr(r, field)) for r in records
           if not r.failed and getattr(r, field) > 0 and not (field == "err_quad" and r.floor)]
    if not pts:
        return np.zeros(0), np.zeros(0)
    N, e = zip(*pts)
    return np.array(N, dtype=float), np.array(e)


def _slope_marker(ax, N, e, rate, label):
    # short reference line of the given slope through the last point
    x1 = N[-1]
    x0 = x1 / 8.0
    y1 = e[-1] * 0.5
    ax.plot([x0, x1], [y1 * (x0 / x1) ** (-rate), y1], "k:", lw=0.8)
    ax.annotate(label, (np.sqrt(x0 * x1), y1 * (np.sqrt(x0 / x1)) ** (-rate)),
                textcoords="offset points", xytext=(0, -10), fontsize=7)


def plot_campaign(runs: dict, path, title: str = "", rate: float | None = None) -> Path:
    """Two panels: |u - u_hp,q| and |u_hp,p+11 - u_hp,q| against N.

    ``runs`` maps the quadrature offset j to the list of records.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, 2, sharex=True)
        for j in sorted(runs):
            recs = runs[j]
            N, e = _series(recs, "err_total")
            if N.size:
                axes[0].loglog(N, e, "o-", label=f"q = p+{j}")
            N, e = _series(recs, "err_quad")
            if N.size:
                axes[1].loglog(N, e, "s-", label=f"q = p+{j}")
        if rate is not None:
            N, e = _series(runs[max(runs)], "err_total")
            if N.size >= 2:
                _slope_marker(axes[0], N, e, rate, f"{rate:.2f}")
        axes[0].set_ylabel("error in $H^1$ seminorm")
        axes[0].set_title("total error", fontsize=9)
        axes[1].set_title("quadrature error", fontsize=9)
        for ax in axes:
            ax.set_xlabel("degrees of freedom $N$")
            ax.grid(True, which="major", lw=0.3, alpha=0.6)
        axes[1].legend(loc="lower left", frameon=False)
        if title:
            fig.suptitle(title, fontsize=10)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_spectrum(rows, path, p: int) -> Path:
    """Smallest and largest eigenvalue against the number of Gauss points."""
    path = Path(path)
    q = np.array([r[0] for r in rows])
    lo = np.array([max(r[1], 1e-300) for r in rows])
    hi = np.array([r[2] for r in rows])
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ax.semilogy(q, np.abs(lo), "o-", label=r"$|\lambda_{\min}|$")
        ax.semilogy(q, hi, "s-", label=r"$\lambda_{\max}$")
        ax.axvline(p - 0.5, color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("Gauss points per direction $q$")
        ax.set_ylabel("eigenvalue")
        ax.set_title(f"stiffness spectrum, p = {p}", fontsize=9)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
