"""Evaluation metrics. Scores are "larger = more anomalous" throughout."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..calibrate import select_threshold_coverage
from ..errors import ArgumentError, UndefinedMetricError

EPS = 1e-12
COVERAGE_GRID = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)


def _as_binary(labels):
    lab = np.asarray(labels)
    if lab.dtype != bool:
        if not np.all(np.isin(lab, (0, 1))):
            raise ArgumentError("labels must be binary")
        lab = lab.astype(bool)
    return lab


def pr_curve(scores, labels, weights=None):
    """Precision/recall at every unique score threshold (alarm iff s >= tau).

    Returns ``(thresholds, precision, recall)`` with thresholds descending.
    """
    s = np.asarray(scores, dtype=np.float64)
    lab = _as_binary(labels)
    w = np.ones(len(s)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(s) != len(lab) or len(w) != len(s):
        raise ArgumentError("scores, labels and weights must align")
    pos_total = float(np.sum(w[lab]))
    if pos_total <= 0:
        raise UndefinedMetricError("no positive frames")
    order = np.argsort(-s, kind="stable")
    s, lab, w = s[order], lab[order], w[order]
    tp = np.cumsum(np.where(lab, w, 0.0))
    fp = np.cumsum(np.where(lab, 0.0, w))
    last = np.r_[s[1:] != s[:-1], True]
    tp, fp, thr = tp[last], fp[last], s[last]
    precision = tp / np.maximum(tp + fp, EPS)
    recall = tp / max(pos_total, EPS)
    return thr, precision, recall


def frame_auprc(scores, labels, weights=None) -> float:
    """Area under the PR curve with interpolated (running-max) precision.

    Each recall increment is credited with the best precision attained at
    that recall or higher.
    """
    _, prec, rec = pr_curve(scores, labels, weights)
    interp = np.maximum.accumulate(prec[::-1])[::-1]
    d_rec = np.diff(np.concatenate([[0.0], rec]))
    return float(np.clip(np.sum(d_rec * interp), 0.0, 1.0))


def event_weights(events, n: int) -> np.ndarray:
    """Per-frame weights giving every event and the background equal mass."""
    w = np.zeros(n)
    inside = np.zeros(n, dtype=bool)
    for ev in events:
        sl = slice(ev.onset, ev.offset + 1)
        w[sl] = 1.0 / len(ev)
        inside[sl] = True
    bg = ~inside
    if bg.any():
        w[bg] = 1.0 / bg.sum()
    return w


def roc_curve(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    lab = _as_binary(labels)
    P, N = int(lab.sum()), int((~lab).sum())
    if P == 0 or N == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, lab = s[order], lab[order]
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    last = np.r_[s[1:] != s[:-1], True]
    tpr = np.concatenate([[0.0], tp[last] / P])
    fpr = np.concatenate([[0.0], fp[last] / N])
    return np.concatenate([[np.inf], s[last]]), fpr, tpr


def auroc(scores, labels) -> float:
    """Trapezoidal ROC area; tied scores form a single diagonal step."""
    _, fpr, tpr = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def delay_at_threshold(events, scores, tau):
    """Per-event delay from onset to the first in-event alarm.

    Returns ``(median_delay, miss_rate, delays)``; missed events carry NaN
    and the median is over detected events only (NaN when none).
    """
    s = np.asarray(scores, dtype=np.float64)
    delays = []
    for ev in events:
        hit = np.flatnonzero(s[ev.onset:ev.offset + 1] >= tau)
        delays.append(float(hit[0]) if hit.size else math.nan)
    d = np.asarray(delays)
    if not len(d):
        return math.nan, math.nan, []
    found = d[~np.isnan(d)]
    med = float(np.median(found)) if found.size else math.nan
    return med, float(np.mean(np.isnan(d))), delays


def fpr_at_recall(scores, labels, clean_mask, recall=0.9) -> float:
    """False-alarm rate on clean-ID negative frames at the largest threshold
    reaching the requested recall on positive frames."""
    thr, _, rec = pr_curve(scores, labels)
    ok = np.flatnonzero(rec >= recall - EPS)
    tau = thr[ok[0]]
    s = np.asarray(scores, dtype=np.float64)
    neg = np.asarray(clean_mask, dtype=bool) & ~_as_binary(labels)
    if not neg.any():
        raise UndefinedMetricError("no clean negative frames")
    return float(np.mean(s[neg] >= tau))


def risk_coverage(U, correct, grid=COVERAGE_GRID):
    """Selective risk at each target coverage (accept iff ``U < tau``).

    Returns a dict with per-point rows and the trapezoidal area over the
    nominal coverage grid.
    """
    U = np.asarray(U, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    rows, skipped = [], False
    for k in grid:
        tau = select_threshold_coverage(U, k)
        acc = U < tau
        if not acc.any():
            skipped = True
            continue
        rows.append({"target": float(k), "tau": float(tau), "coverage": float(acc.mean()),
                     "risk": float(1.0 - correct[acc].mean())})
    xs = np.array([r["target"] for r in rows])
    ys = np.array([r["risk"] for r in rows])
    aurc = float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0)) if len(rows) > 1 else math.nan
    return {"points": rows, "aurc": aurc, "skipped": skipped}


def calib_metrics(posteriors, labels, n_bins=15) -> dict:
    p = np.asarray(posteriors, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, L = p.shape
    py = p[np.arange(n), y]
    nll = float(-np.mean(np.log(np.maximum(py, 1e-300))))
    onehot = np.zeros_like(p)
    onehot[np.arange(n), y] = 1.0
    brier = float(np.mean(np.sum((p - onehot) ** 2, axis=1) / L))
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    return {"nll": nll, "brier": brier, "ece": ece(conf, correct, n_bins)}


def ece(conf, correct, n_bins=15) -> float:
    """Equal-mass binned calibration error; tied confidences share a bin."""
    conf = np.asarray(conf, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    edges = np.quantile(conf, np.linspace(0.0, 1.0, n_bins + 1))
    b = np.searchsorted(edges[1:-1], conf, side="right")
    total = 0.0
    for k in np.unique(b):
        sel = b == k
        total += sel.sum() * abs(correct[sel].mean() - conf[sel].mean())
    return float(total / len(conf))


def selective_nll(posteriors, labels, U, tau) -> float:
    p = np.asarray(posteriors, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    acc = np.asarray(U) < tau
    if not acc.any():
        raise UndefinedMetricError("no accepted samples")
    py = p[np.arange(len(y)), y][acc]
    return float(-np.sum(np.log(np.maximum(py, 1e-300))) / max(acc.sum(), EPS))


def bootstrap_ci(metric, n_units: int, n_boot=1000, seed=0, alpha=0.05) -> dict:
    """Percentile bootstrap over resampled unit indices.

    ``metric(idx)`` evaluates the statistic on the units selected by the
    integer index array ``idx``. Resample ``i`` draws from its own generator
    seeded with ``(seed, i)``, so results do not depend on evaluation order.
    """
    if n_units < 1:
        raise ArgumentError("nothing to resample")
    point = float(metric(np.arange(n_units)))
    vals, undefined = [], 0
    for i in range(n_boot):
        idx = np.random.default_rng([seed, i]).integers(0, n_units, n_units)
        try:
            v = float(metric(idx))
        except UndefinedMetricError:
            undefined += 1
            continue
        if math.isnan(v):
            undefined += 1
            continue
        vals.append(v)
    if vals:
        lo, hi = np.percentile(vals, [100 * alpha / 2, 100 * (1 - alpha / 2)])
        lo, hi = min(float(lo), point), max(float(hi), point)
    else:
        lo = hi = math.nan
    return {"point": point, "lo": lo, "hi": hi, "n_boot": n_boot,
            "undefined": undefined, "widened": undefined > 0.1 * n_boot}


@dataclass
class MetricReport:
    method: str
    auprc: float
    auprc_event_weighted: float
    auprc_ci: dict
    auroc: float
    median_delay: float
    delay_ci: dict
    miss_rate: float
    fpr_at_recall: float
    threshold: float
    n_events: int
    risk_coverage: dict = field(default_factory=dict)
    selective_nll: float = math.nan
    calibration: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, np.generic):
                return clean(v.item())
            return v
        return clean(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)
