"""Offline mappings from (S, m) to an error probability, thresholds, and the
online abstention-budget controller."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FitError, StateError
from .nnet import softmax

TEMPERATURE_GRID = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0)
GAMMA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
CLIP = 1e-4


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def data_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


# ------------------------------------------------------------ temperature

def nll_at_temperature(logits, labels, T) -> float:
    p = softmax(np.asarray(logits, dtype=np.float64) / T)
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(labels)), labels], 1e-300))))


def fit_temperature(logits, labels, grid=TEMPERATURE_GRID) -> float:
    """Grid temperature with the lowest dev NLL; ties resolve to the smaller T."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ArgumentError("empty dev set")
    best_t, best = None, math.inf
    for T in sorted(grid):
        v = nll_at_temperature(logits, labels, T)
        if v < best:
            best_t, best = float(T), v
    return best_t


# --------------------------------------------------------------- mappings

@dataclass
class MappingParams:
    kind: str
    beta: tuple = (0.0, 0.0, 0.0)
    breakpoints: tuple = ()
    values: tuple = ()
    gamma: float = 1.0
    threshold: float = 0.5
    fitted_on: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind == "logistic":
            if len(self.beta) != 3:
                raise ArgumentError("logistic mapping needs three coefficients")
        elif self.kind == "isotonic":
            b = np.asarray(self.breakpoints, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if b.size == 0 or b.shape != v.shape:
                raise StateError("isotonic mapping has no fitted levels")
            if np.any(np.diff(b) <= 0) or np.any(np.diff(v) < 0):
                raise ArgumentError("isotonic mapping must be ascending and nondecreasing")
        else:
            raise ArgumentError(f"unknown mapping kind {self.kind!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ArgumentError("threshold must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": [float(b) for b in self.beta],
                "breakpoints": [float(b) for b in self.breakpoints],
                "values": [float(v) for v in self.values], "gamma": float(self.gamma),
                "threshold": float(self.threshold), "fitted_on": self.fitted_on}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MappingParams":
        return cls(d["kind"], tuple(d.get("beta", (0, 0, 0))), tuple(d.get("breakpoints", ())),
                   tuple(d.get("values", ())), d.get("gamma", 1.0), d.get("threshold", 0.5),
                   d.get("fitted_on", {}))


def map_uncertainty(S, m, mapping: MappingParams | None):
    """U in [0, 1] from the SNAP score and the confidence proxy."""
    if mapping is None:
        raise StateError("no fitted mapping")
    S = np.asarray(S, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if mapping.kind == "logistic":
        b0, b1, b2 = mapping.beta
        u = _sigmoid(b0 + b1 * S + b2 * m)
    elif mapping.kind == "isotonic":
        if not mapping.breakpoints:
            raise StateError("isotonic mapping is not fitted")
        psi = mapping.gamma * S + (1.0 - mapping.gamma) * m
        u = IsotonicMap(np.asarray(mapping.breakpoints), np.asarray(mapping.values))(psi)
    else:
        raise StateError(f"unknown mapping kind {mapping.kind!r}")
    return float(u) if u.ndim == 0 else u


# ---------------------------------------------------------------- logistic

def fit_logistic(S, m, err, l2=1e-4, label_free=False, tol=1e-8, max_iter=200):
    """Class-balanced L2-regularised logistic regression of err on (S, m).

    Newton/IRLS from zero with step halving. The penalty applies to the two
    slopes, not the intercept. ``label_free`` pins the m coefficient at 0.
    Returns ``(b0, b1, b2)``.
    """
    S = np.asarray(S, dtype=np.float64).ravel()
    m = np.asarray(m, dtype=np.float64).ravel()
    y = np.asarray(err, dtype=np.float64).ravel()
    if not (S.shape == m.shape == y.shape):
        raise ArgumentError("S, m and labels must have the same length")
    n1 = float(np.sum(y == 1))
    n0 = float(np.sum(y == 0))
    if n1 == 0 or n0 == 0:
        raise FitError("dev labels contain a single class")
    n = len(y)
    wt = np.where(y == 1, n / (2 * n1), n / (2 * n0))
    cols = [np.ones(n), S] + ([] if label_free else [m])
    X = np.stack(cols, axis=1)
    pen = np.full(X.shape[1], l2)
    pen[0] = 0.0
    beta = np.zeros(X.shape[1])

    def objective(b):
        z = X @ b
        ll = wt * (np.logaddexp(0.0, z) - y * z)
        return float(np.sum(ll) / n + 0.5 * np.sum(pen * b * b))

    f = objective(beta)
    for _ in range(max_iter):
        p = _sigmoid(X @ beta)
        grad = X.T @ (wt * (p - y)) / n + pen * beta
        if np.linalg.norm(grad) <= tol:
            break
        H = (X * (wt * p * (1 - p))[:, None]).T @ X / n + np.diag(pen)
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(len(beta)), grad)
        except np.linalg.LinAlgError:
            step = grad
        t = 1.0
        while True:
            cand = beta - t * step
            fc = objective(cand)
            if fc <= f or t < 1e-10:
                break
            t *= 0.5
        beta, f = cand, fc
    if label_free:
        return float(beta[0]), float(beta[1]), 0.0
    return tuple(float(b) for b in beta)


def balanced_logloss(S, m, err, beta) -> float:
    y = np.asarray(err, dtype=float)
    n = len(y)
    n1, n0 = y.sum(), n - y.sum()
    wt = np.where(y == 1, n / (2 * n1), n / (2 * n0))
    z = beta[0] + beta[1] * np.asarray(S) + beta[2] * np.asarray(m)
    return float(np.sum(wt * (np.logaddexp(0.0, z) - y * z)) / n)


# ---------------------------------------------------------------- isotonic

@dataclass(frozen=True)
class IsotonicMap:
    """Right-continuous step function; the first level applies below range."""

    breakpoints: np.ndarray
    values: np.ndarray
    clip: float = CLIP

    def __call__(self, psi):
        psi = np.asarray(psi, dtype=np.float64)
        idx = np.searchsorted(self.breakpoints, psi, side="right") - 1
        idx = np.clip(idx, 0, len(self.values) - 1)
        out = self.values[idx]
        return np.clip(out, self.clip, 1.0 - self.clip) if self.clip else out


def pav(y, w=None) -> np.ndarray:
    """Weighted pool-adjacent-violators on an already ordered sequence."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    means, weights, counts = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, c2 = means.pop(), weights.pop(), counts.pop()
            m1, w1, c1 = means.pop(), weights.pop(), counts.pop()
            wt = w1 + w2
            means.append((m1 * w1 + m2 * w2) / wt)
            weights.append(wt)
            counts.append(c1 + c2)
    return np.repeat(means, counts)


def fit_isotonic_pav(psi, y, clip=CLIP) -> IsotonicMap:
    """Monotone least-squares fit of binary labels against ``psi``.

    Tied ``psi`` values are pooled first (weighted by multiplicity), so the
    breakpoints are the unique ``psi`` values in ascending order.
    """
    psi = np.asarray(psi, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if psi.size == 0 or psi.shape != y.shape:
        raise ArgumentError("need one label per score and at least one pair")
    uniq, inv, cnt = np.unique(psi, return_inverse=True, return_counts=True)
    sums = np.bincount(inv, weights=y)
    fitted = pav(sums / cnt, cnt.astype(np.float64))
    return IsotonicMap(uniq, fitted, clip)


def _cv_sse(psi, y):
    idx = np.arange(len(y))
    sse = 0.0
    for fold in (0, 1):
        tr, te = idx % 2 != fold, idx % 2 == fold
        if not tr.any() or not te.any():
            continue
        f = fit_isotonic_pav(psi[tr], y[tr], clip=0.0)
        sse += float(np.sum((y[te] - f(psi[te])) ** 2))
    return sse


def fit_isotonic_mapping(S, m, err, gamma=None, grid=GAMMA_GRID) -> MappingParams:
    """Isotonic map over ``psi = gamma*S + (1-gamma)*m``.

    Without ``gamma`` the blend is picked from ``grid`` by two-fold
    (even/odd index) squared error; ties go to the larger gamma.
    """
    S = np.asarray(S, dtype=np.float64).ravel()
    m = np.asarray(m, dtype=np.float64).ravel()
    y = np.asarray(err, dtype=np.float64).ravel()
    if gamma is None:
        best, gamma = math.inf, 1.0
        for g in sorted(grid, reverse=True):
            sse = _cv_sse(g * S + (1 - g) * m, y)
            if sse < best - 1e-12:
                best, gamma = sse, float(g)
    f = fit_isotonic_pav(gamma * S + (1 - gamma) * m, y)
    vals = np.clip(f.values, CLIP, 1 - CLIP)
    return MappingParams("isotonic", breakpoints=tuple(f.breakpoints.tolist()),
                         values=tuple(vals.tolist()), gamma=float(gamma))


# --------------------------------------------------------------- thresholds

def f1_at(scores, labels, tau) -> float:
    pred = np.asarray(scores) >= tau
    lab = np.asarray(labels).astype(bool)
    tp = float(np.sum(pred & lab))
    fp = float(np.sum(pred & ~lab))
    fn = float(np.sum(~pred & lab))
    return 2 * tp / max(2 * tp + fp + fn, 1e-12)


def select_threshold_f1(scores, labels) -> float:
    """Score threshold (alarm iff score >= tau) maximising frame F1.

    Candidates are the unique scores; ties go to the larger threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if not labels.any():
        raise FitError("no positive frames on the dev stream")
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    last = np.r_[s[1:] != s[:-1], True]
    cand, tp, fp = s[last], tp[last], fp[last]
    P = labels.sum()
    f1 = 2 * tp / np.maximum(tp + fp + P, 1e-12)
    best = np.max(f1)
    # candidates are sorted descending, so the first maximiser is the largest tau
    return float(cand[np.flatnonzero(f1 >= best)[0]])


def select_threshold_coverage(U, kappa) -> float:
    """Threshold tau such that accepting ``U < tau`` covers the smallest
    fraction that is still >= ``kappa``."""
    U = np.sort(np.asarray(U, dtype=np.float64).ravel())
    if not 0 < kappa <= 1:
        raise ArgumentError("coverage target must lie in (0, 1]")
    n = len(U)
    if n == 0:
        raise ArgumentError("empty score set")
    k = int(math.ceil(kappa * n - 1e-12))
    k = min(max(k, 1), n)
    # smallest achievable count >= k: extend to include ties of the k-th value
    if k == n:
        return float(np.nextafter(U[-1], np.inf))
    if U[k] > U[k - 1]:
        return float(U[k])
    j = np.searchsorted(U, U[k - 1], side="right")
    return float(U[j]) if j < n else float(np.nextafter(U[-1], np.inf))


def coverage(U, tau) -> float:
    return float(np.mean(np.asarray(U) < tau))


# ------------------------------------------------------------------ budget

@dataclass
class BudgetState:
    budget: float
    eta: float = 0.01
    kappa: float = 0.05
    tau: float = 0.5
    rate: float = 0.0

    def validate(self) -> None:
        if not 0 < self.budget < 1:
            raise ArgumentError("budget must lie in (0, 1)")
        if not 0 < self.eta <= 1:
            raise ArgumentError("eta must lie in (0, 1]")
        if not self.kappa > 0:
            raise ArgumentError("kappa must be positive")
        if not 0 <= self.rate <= 1:
            raise ArgumentError("abstention average must lie in [0, 1]")


def budget_step(state: BudgetState, u: float):
    """One controller update. Returns ``(abstain, new_state)``.

    The decision uses the current threshold; the average abstention rate and
    then the threshold are updated afterwards.
    """
    abstain = bool(u >= state.tau)
    rate = state.eta * float(abstain) + (1.0 - state.eta) * state.rate
    tau = min(1.0, max(0.0, state.tau + state.kappa * (rate - state.budget)))
    return abstain, BudgetState(state.budget, state.eta, state.kappa, tau, rate)


def run_budget(U, state: BudgetState):
    """Apply the controller over a sequence; returns (decisions, taus, state)."""
    state.validate()
    decisions = np.empty(len(U), dtype=bool)
    taus = np.empty(len(U))
    for i, u in enumerate(np.asarray(U, dtype=np.float64)):
        taus[i] = state.tau
        decisions[i], state = budget_step(state, u)
    return decisions, taus, state
