"""
Convergence charts. Rendering is headless (Agg) and SVG output is made
byte-stable: no date stamp and a fixed hash salt for element ids.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["plot_report", "plot_histories"]

_STYLE = {
    "svg.hashsalt": "flexkrylov",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
}

_MARKERS = {"psd": "o", "pcg": "x", "full": "s", "alg1-modified": "^", "alg1-standard": "d"}

_TITLES = {
    "fig1": "Worst-case variable preconditioning",
    "fig2": "Inner CG as variable preconditioner",
    "fig3": "Two-grid preconditioning: fixed vs random coarse grids",
    "custom": "Convergence history",
}


def plot_histories(histories, path, title="", bound=None):
    """
    Semilog-y plot of ``||e_k||_A`` against ``k``, one line per history.

    Each line carries ``gid`` equal to its legend label so the SVG can be
    inspected per series. ``bound`` is an optional (label, values) pair
    drawn dotted.
    """
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        try:
            for h in histories:
                if not h.error_norms:
                    continue
                line, = ax.semilogy(range(len(h.error_norms)), h.error_norms,
                                    marker=_MARKERS.get(h.method, "."), markevery=5,
                                    markersize=4, linewidth=1.2, label=h.label)
                line.set_gid(h.label)
            if bound is not None:
                label, values = bound
                line, = ax.semilogy(range(len(values)), values, linestyle=":", color="tab:red",
                                    marker="s", markevery=5, markersize=3, label=label)
                line.set_gid(label)
            ax.set_xlabel("iteration")
            ax.set_ylabel(r"$\|e_k\|_A$")
            if title:
                ax.set_title(title)
            ax.legend(fontsize=8)
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    return path


def plot_report(report, path):
    ref = next((h for h in report.histories if h.bound is not None and h.error_norms), None)
    bound = None
    if ref is not None:
        bound = (f"bound ({ref.bound:.4g})^k", ref.bound_line())
    return plot_histories(report.histories, path, _TITLES.get(report.config.experiment, ""),
                          bound)
