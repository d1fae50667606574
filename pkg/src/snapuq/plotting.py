"""Report figures, rendered headless to PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def plot_severity(series: dict, path):
    """AUPRC against corruption severity, one line per method."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        sev = series["severity"]
        for name, vals in series["auprc"].items():
            ax.plot(sev, vals, marker="o", label=name)
        ax.set_xlabel("severity")
        ax.set_ylabel("failure AUPRC")
        ax.set_xticks(sev)
        ax.legend()
        return _save(fig, path)


def plot_pr(curves: dict, path):
    """``curves`` maps method -> (precision, recall)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.4))
        for name, (prec, rec) in curves.items():
            ax.step(np.r_[0.0, rec], np.r_[prec[0] if len(prec) else 1.0, prec],
                    where="pre", label=name)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
        return _save(fig, path)


def plot_risk_coverage(rc: dict, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        pts = rc["points"]
        ax.plot([p["coverage"] for p in pts], [p["risk"] for p in pts], marker="o")
        ax.set_xlabel("coverage")
        ax.set_ylabel("selective risk")
        ax.set_title(f"AURC {rc['aurc']:.4f}")
        return _save(fig, path)


def plot_stream(score, labels, regime, path, tau=None, name="U"):
    """Per-frame score with event frames shaded and regime boundaries marked."""
    score = np.asarray(score)
    labels = np.asarray(labels, dtype=bool)
    t = np.arange(len(score))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 2.6))
        ax.plot(t, score, lw=0.8, color="C0", label=name)
        lo, hi = float(np.min(score)), float(np.max(score))
        ax.fill_between(t, lo, hi, where=labels, color="C3", alpha=0.15, step="mid",
                        label="event")
        for b in np.flatnonzero(np.diff(np.asarray(regime)) != 0) + 1:
            ax.axvline(b, color="0.6", lw=0.5, ls=":")
        if tau is not None:
            ax.axhline(tau, color="C1", lw=0.8, ls="--", label="threshold")
        ax.set_xlabel("frame")
        ax.legend(loc="upper left", fontsize=7, ncol=3)
        return _save(fig, path)
