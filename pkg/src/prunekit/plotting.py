"""Report figures rendered with matplotlib (Agg) to SVG.

Output is made reproducible by fixing the SVG hash salt and dropping the
creation date; figures are still not part of any golden comparison.
"""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import __version__  # noqa: E402

RC = {
    "svg.hashsalt": "prunekit",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}
METHOD_LABELS = {"permutation": "FPI", "shapley": "SHAP", "select_k_best": "FS"}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": f"prunekit {__version__}"})
    plt.close(fig)


def importance_bar_chart(report, path, max_features: int = 30) -> None:
    """Horizontal bars, most important feature on top."""
    names = report.rank[:max_features]
    scores = [report.scores[n] for n in names]
    finite = [s for s in scores if s != float("inf")]
    cap = max(finite) * 1.1 if finite and max(finite) > 0 else 1.0
    shown = [cap if s == float("inf") else s for s in scores]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 0.25 * len(names) + 1.2))
        ax.barh(range(len(names)), shown, color="#4c72b0")
        ax.set_yticks(range(len(names)), names)
        ax.invert_yaxis()
        ax.set_xlabel("importance score")
        label = METHOD_LABELS.get(report.method, report.method)
        ax.set_title(f"Feature importance ({label})")
        fig.tight_layout()
        _save(fig, path)


def sweep_chart(results: Sequence, path) -> None:
    """Mean CV MAPE against the top-p% of features kept, one line per method."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        for res in results:
            ps = [pt.p for pt in res.points]
            order = sorted(range(len(ps)), key=ps.__getitem__)
            ax.plot([ps[i] for i in order], [res.points[i].cv.mean_mape for i in order], marker="o",
                    label=METHOD_LABELS.get(res.method, res.method))
        ax.set_xlabel("top features kept (%)")
        ax.set_ylabel("mean CV MAPE (%)")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def interval_chart(result, path) -> None:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        xs = [100.0 * f for f in result.fractions]
        ax.plot(xs, [r.mean_mape for r in result.reports], marker="o", color="#dd8452")
        ax.set_xlabel("share of series observed (%)")
        ax.set_ylabel("mean CV MAPE (%)")
        fig.tight_layout()
        _save(fig, path)
