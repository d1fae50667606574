"""Single-pass uncertainty scores. Every score is oriented so that larger
means more uncertain."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .calibrate import BudgetState, MappingParams, budget_step, map_uncertainty
from .errors import ArgumentError, IncompatibleArtifactError, StateError
from .heads import ebar as tap_ebar
from .heads import head_forward, project
from .nnet import forward_collect, softmax
from .quantize import quantized_ebars

BASELINES = ("msp", "temp", "entropy", "energy", "maha")


@dataclass
class MahalanobisStats:
    taps: tuple
    means: list       # per tap, (n_classes, d)
    variances: list   # per tap, (d,)

    def to_dict(self) -> dict:
        return {"taps": list(self.taps), "means": [m.tolist() for m in self.means],
                "variances": [v.tolist() for v in self.variances]}

    @classmethod
    def from_dict(cls, d) -> "MahalanobisStats":
        return cls(tuple(d["taps"]), [np.asarray(m) for m in d["means"]],
                   [np.asarray(v) for v in d["variances"]])


@dataclass
class ScoreConfig:
    weights: tuple = ()
    alpha: float = 0.5
    mapping: MappingParams | None = None
    temperature: float = 1.0
    energy_temperature: float = 1.0
    maha: MahalanobisStats | None = None
    shrinkage: float = 1e-4

    def validate(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.size and (np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9):
            raise ArgumentError("scoring weights must be nonnegative and sum to 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ArgumentError("alpha must lie in [0, 1]")
        if self.temperature <= 0 or self.energy_temperature <= 0:
            raise ArgumentError("temperatures must be positive")


@dataclass
class ScoreRecord:
    ebar: list
    S: float
    m: float
    U: float | None
    pred: int
    conf: float
    margin: float
    baselines: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"ebar": self.ebar, "S": self.S, "m": self.m, "U": self.U,
                           "pred": self.pred, "conf": self.conf, "margin": self.margin,
                           **{f"score_{k}": v for k, v in self.baselines.items()}},
                          sort_keys=True)


def _weights(w, k):
    if w is None or len(w) == 0:
        return np.full(k, 1.0 / k)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (k,):
        raise ArgumentError(f"need {k} scoring weights, got {w.shape}")
    return w


def tap_ebars(trace, heads) -> np.ndarray:
    """Per-tap ``ebar`` for a batch trace, shape (N, n_taps)."""
    cols = []
    for h in heads:
        if h.tap > trace.depth:
            raise StateError(f"trace has no activation for tap {h.tap}")
        out = head_forward(h, project(h, trace.vector(h.tap - 1)))
        cols.append(np.atleast_1d(tap_ebar(h, trace.vector(h.tap), out)))
    return np.stack(cols, axis=1)


def snap_score(trace, heads, w=None):
    """Returns ``(ebars, S)`` with ``S = sum_l w_l * ebar_l``."""
    e = tap_ebars(trace, heads)
    return e, e @ _weights(w, e.shape[1])


def confidence_proxy(posteriors, alpha=0.5):
    """``alpha*(1 - max p) + (1 - alpha)*(1 - (p_top1 - p_top2))``."""
    p = np.asarray(posteriors, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    top = np.sort(p, axis=-1)[:, ::-1]
    conf = top[:, 0]
    margin = top[:, 0] - (top[:, 1] if p.shape[1] > 1 else 0.0)
    m = alpha * (1.0 - conf) + (1.0 - alpha) * (1.0 - margin)
    m = np.clip(m, 0.0, 1.0)
    return float(m[0]) if single else m


def decide(U, tau, budget: BudgetState | None = None):
    """Abstain iff ``U >= tau`` and, when a controller is given, it agrees.

    Returns ``(abstain, budget)``; the controller state advances on every call.
    """
    if not 0.0 <= tau <= 1.0:
        raise ArgumentError("threshold must lie in [0, 1]")
    want = bool(U >= tau)
    if budget is None:
        return want, None
    allowed, budget = budget_step(budget, U)
    return want and allowed, budget


# -------------------------------------------------------------- baselines

def entropy(posteriors):
    p = np.asarray(posteriors, dtype=np.float64)
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def energy(logits, T=1.0):
    z = np.asarray(logits, dtype=np.float64) / T
    zmax = np.max(z, axis=-1, keepdims=True)
    return -(zmax[..., 0] + np.log(np.sum(np.exp(z - zmax), axis=-1)))


def fit_mahalanobis(trace, labels, taps, n_classes, shrinkage=1e-4) -> MahalanobisStats:
    """Class means and a shared diagonal covariance per tap (ID training data)."""
    labels = np.asarray(labels)
    means, variances = [], []
    for t in taps:
        a = trace.vector(t)
        mu = np.zeros((n_classes, a.shape[1]))
        resid = np.empty_like(a)
        for c in range(n_classes):
            sel = labels == c
            if sel.any():
                mu[c] = a[sel].mean(axis=0)
            resid[sel] = a[sel] - mu[c]
        var = np.mean(resid ** 2, axis=0) + shrinkage
        means.append(mu)
        variances.append(np.maximum(var, 1e-12))
    return MahalanobisStats(tuple(taps), means, variances)


def mahalanobis_score(trace, stats: MahalanobisStats | None, w=None):
    """Min over classes of the weighted, dimension-normalised diagonal
    quadratic summed over taps."""
    if stats is None:
        raise StateError("Mahalanobis statistics are not fitted")
    w = _weights(w, len(stats.taps))
    total = 0.0
    for wl, t, mu, var in zip(w, stats.taps, stats.means, stats.variances):
        a = trace.vector(t)
        q = np.sum((a[:, None, :] - mu[None]) ** 2 / var, axis=-1) / a.shape[1]
        total = total + wl * q
    return np.min(total, axis=1)


def baseline_scores(trace, posteriors, cfg: ScoreConfig) -> dict:
    """All single-pass baselines; ``maha`` is included only when fitted.

    ``temp`` is the maximum-probability score after temperature scaling.
    """
    logits = trace.logits
    p_t = posteriors if cfg.temperature == 1.0 else softmax(logits / cfg.temperature)
    out = {
        "msp": 1.0 - np.max(posteriors, axis=-1),
        "temp": 1.0 - np.max(p_t, axis=-1),
        "entropy": entropy(posteriors),
        "energy": energy(logits, cfg.energy_temperature),
    }
    if cfg.maha is not None:
        out["maha"] = mahalanobis_score(trace, cfg.maha, cfg.weights or None)
    return out


# ---------------------------------------------------------------- batches

def score_arrays(model, x, cfg: ScoreConfig, engine="float", batch=512) -> dict:
    """Vectorised scoring of a dataset. Returns a dict of per-example arrays."""
    cfg.validate()
    if engine not in ("float", "int8"):
        raise ArgumentError(f"unknown engine {engine!r}")
    if engine == "int8" and model.quant is None:
        raise IncompatibleArtifactError("container has no quantised heads for the int8 engine")
    if engine == "int8":
        for h in model.heads:
            model.quant.head(h.tap)
    parts = []
    for i in range(0, len(x), batch):
        trace, post = forward_collect(model.backbone, x[i:i + batch])
        if engine == "int8":
            e = quantized_ebars(model.quant, trace)
        else:
            e = tap_ebars(trace, model.heads)
        S = e @ _weights(cfg.weights, e.shape[1])
        chunk = {"ebar": e, "S": S, "m": confidence_proxy(post, cfg.alpha),
                 "pred": np.argmax(post, axis=-1), "conf": np.max(post, axis=-1),
                 "posteriors": post}
        top = np.sort(post, axis=-1)
        chunk["margin"] = top[:, -1] - top[:, -2]
        for k, v in baseline_scores(trace, post, cfg).items():
            chunk["score_" + k] = v
        parts.append(chunk)
    out = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    out["U"] = map_uncertainty(out["S"], out["m"], cfg.mapping) if cfg.mapping else None
    return out


def records_from_arrays(arr: dict) -> list:
    recs = []
    base = [k for k in arr if k.startswith("score_")]
    for i in range(len(arr["S"])):
        recs.append(ScoreRecord(
            ebar=[float(v) for v in arr["ebar"][i]], S=float(arr["S"][i]),
            m=float(arr["m"][i]), U=None if arr["U"] is None else float(arr["U"][i]),
            pred=int(arr["pred"][i]), conf=float(arr["conf"][i]),
            margin=float(arr["margin"][i]),
            baselines={k[6:]: float(arr[k][i]) for k in base}))
    return recs


def score_config_from_model(model) -> ScoreConfig:
    """Rebuild the scoring configuration stored in a model's manifest."""
    cal = model.calibration or {}
    mapping = MappingParams.from_dict(cal["mapping"]) if "mapping" in cal else None
    maha = MahalanobisStats.from_dict(cal["maha"]) if "maha" in cal else None
    return ScoreConfig(weights=tuple(cal.get("weights", ())), alpha=cal.get("alpha", 0.5),
                       mapping=mapping, temperature=cal.get("temperature", 1.0),
                       energy_temperature=cal.get("energy_temperature", 1.0), maha=maha,
                       shrinkage=cal.get("shrinkage", 1e-4))
