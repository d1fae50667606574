"""End-to-end workflows shared by the command line and the evaluation suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .calibrate import (
    MappingParams,
    data_hash,
    fit_isotonic_mapping,
    fit_logistic,
    fit_temperature,
    select_threshold_f1,
)
from .errors import FitError, UndefinedMetricError
from .model import SnapModel, build_model
from .nnet import conv_spec, forward_collect, mlp_spec
from .scorer import ScoreConfig, energy, fit_mahalanobis, score_arrays, score_config_from_model
from .streamlab import metrics as M
from .streamlab.data import CORRUPTIONS, Datasets, Split, corrupt, make_datasets
from .streamlab.stream import (
    LabeledStream,
    StreamSpec,
    accuracy_band,
    build_id_stream,
    build_stream,
    frame_labels,
    label_events,
)
from .trainer import TrainConfig, dev_ebars, fit_layer_weights, train

log = logging.getLogger(__name__)

ENERGY_GRID = (0.5, 1.0, 1.5, 2.0)
METHODS = ("snap", "snap_S", "msp", "temp", "entropy", "energy", "maha")


def default_backbone(kind: str):
    """Backbone spec and projector ranks for a dataset kind."""
    if kind == "vector":
        return mlp_spec(), (32,)
    return conv_spec(), (8, 16)


def default_train_config(kind: str, seed: int, **overrides) -> TrainConfig:
    if kind == "vector":
        base = dict(optimizer="adam", lr=3e-3, lr_min=1e-5, epochs=30, batch_size=64)
    else:
        base = dict(optimizer="sgd", lr=0.05, lr_min=1e-4, epochs=8, batch_size=32)
    base.update(overrides)
    return TrainConfig(seed=seed, **base)


def train_model(data: Datasets, seed: int, cfg: TrainConfig | None = None,
                log_path=None) -> tuple:
    spec, ranks = default_backbone(data.kind)
    cfg = cfg or default_train_config(data.kind, seed)
    model = build_model(spec, ranks, np.random.default_rng(seed), density=cfg.density)
    records = train(model, data.train.x, data.train.y, cfg,
                    dev=(data.dev.x, data.dev.y), log_path=log_path)
    model.meta.update({"seed": seed, "dataset": data.kind})
    return model, records


# ------------------------------------------------------------- calibration

def dev_mix(data: Datasets, seed: int, n=600) -> Split:
    """Dev examples: clean, corrupted at random type/severity, and OOD."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    k = min(n, len(data.dev))
    idx = rng.permutation(len(data.dev))[:k]
    clean = data.dev.take(idx[: k // 2])
    cor = data.dev.take(idx[k // 2:])
    xs = []
    kinds = rng.integers(0, len(CORRUPTIONS), len(cor))
    sevs = rng.integers(1, 6, len(cor))
    for i in range(len(cor)):
        xs.append(corrupt(cor.x[i:i + 1], CORRUPTIONS[kinds[i]], int(sevs[i]), rng)[0])
    ood = data.ood_dev.take(rng.permutation(len(data.ood_dev))[: max(1, k // 6)])
    return Split(np.concatenate([clean.x, np.stack(xs), ood.x]),
                 np.concatenate([clean.y, cor.y, ood.y]))


@dataclass
class CalibrationResult:
    weights: tuple
    temperature: float
    energy_temperature: float
    mapping: MappingParams
    thresholds: dict
    band: tuple
    uniform_fallback: bool
    extra: dict = field(default_factory=dict)


def _energy_temperature(model, data) -> float:
    """Energy temperature with the best dev AUROC for ID vs OOD."""
    tr_id, _ = forward_collect(model.backbone, data.dev.x)
    tr_ood, _ = forward_collect(model.backbone, data.ood_dev.x)
    best, best_t = -1.0, 1.0
    lab = np.r_[np.zeros(len(data.dev)), np.ones(len(data.ood_dev))]
    for T in ENERGY_GRID:
        s = np.r_[energy(tr_id.logits, T), energy(tr_ood.logits, T)]
        a = M.auroc(s, lab)
        if a > best + 1e-12:
            best, best_t = a, T
    return float(best_t)


def calibrate_model(model: SnapModel, data: Datasets, seed: int, mapping="logistic",
                    label_free=False, gamma=None, alpha=0.5, stream_spec=None) -> CalibrationResult:
    """Fit scoring weights, baselines, the (S, m) -> U map and stream thresholds.

    Everything is fitted on dev or train data; the result is also stored in
    ``model.calibration``.
    """
    k = len(model.heads)
    if k > 1:
        _, w, fallback = fit_layer_weights(dev_ebars(model, data.dev.x))
    else:
        w, fallback = np.ones(1), False
    weights = tuple(float(v) for v in w)

    tr_dev, _ = forward_collect(model.backbone, data.dev.x)
    T = fit_temperature(tr_dev.logits, data.dev.y)
    T_eng = _energy_temperature(model, data)
    tr_train, _ = forward_collect(model.backbone, data.train.x)
    maha = fit_mahalanobis(tr_train, data.train.y, model.taps, model.spec.n_classes)
    cfg = ScoreConfig(weights=weights, alpha=alpha, temperature=T,
                      energy_temperature=T_eng, maha=maha)

    mix = dev_mix(data, seed)
    arr = score_arrays(model, mix.x, cfg)
    err = (arr["pred"] != mix.y).astype(float)
    if mapping == "logistic":
        beta = fit_logistic(arr["S"], arr["m"], err, label_free=label_free)
        mp = MappingParams("logistic", beta=beta)
    elif mapping == "isotonic":
        mp = fit_isotonic_mapping(arr["S"], arr["m"], err, gamma=gamma)
    else:
        raise FitError(f"unknown mapping {mapping!r}")
    mp.fitted_on = {"dev_hash": data_hash(mix.x, mix.y), "n": int(len(mix.y)), "seed": seed}
    cfg.mapping = mp

    spec = stream_spec or StreamSpec(seed=seed)
    ref = build_id_stream(min(len(data.dev), max(10 * spec.window, 500)), data.dev, seed)
    _, post_ref = forward_collect(model.backbone, ref.x)
    band = accuracy_band(post_ref.argmax(1) == ref.y, spec.window)

    _, dev_stream = build_stream(_shift_seed(spec, 1), data.dev, data.ood_dev)
    dev_scores = stream_scores(model, dev_stream, cfg)
    events = label_events(dev_scores["pred"] == dev_stream.y, spec.window, band)
    labels = frame_labels(events, len(dev_stream))
    thresholds = {}
    for name in METHODS:
        if name in dev_scores and labels.any():
            thresholds[name] = select_threshold_f1(dev_scores[name], labels)
    mp.threshold = float(np.clip(thresholds.get("snap", 0.5), 0.0, 1.0))

    model.calibration = {
        "weights": list(weights), "alpha": alpha, "temperature": T,
        "energy_temperature": T_eng, "mapping": mp.to_dict(), "maha": maha.to_dict(),
        "thresholds": thresholds, "band": list(band), "window": spec.window,
        "uniform_weight_fallback": fallback,
    }
    return CalibrationResult(weights, T, T_eng, mp, thresholds, band, fallback)


def _shift_seed(spec: StreamSpec, offset: int) -> StreamSpec:
    return replace(spec, seed=spec.seed + 1000 * offset)


# ----------------------------------------------------------------- scoring

def stream_scores(model: SnapModel, stream: LabeledStream | np.ndarray, cfg=None,
                  engine="float") -> dict:
    """Per-frame scores for every method, keyed by method name."""
    cfg = cfg or score_config_from_model(model)
    x = stream.x if isinstance(stream, LabeledStream) else stream
    arr = score_arrays(model, x, cfg, engine=engine)
    out = {"pred": arr["pred"], "posteriors": arr["posteriors"], "snap_S": arr["S"],
           "m": arr["m"], "ebar": arr["ebar"]}
    if arr["U"] is not None:
        out["snap"] = arr["U"]
    for k in ("msp", "temp", "entropy", "energy", "maha"):
        if "score_" + k in arr:
            out[k] = arr["score_" + k]
    return out


def evaluate_stream(model: SnapModel, stream: LabeledStream, n_boot=200, seed=0,
                    engine="float", methods=METHODS) -> dict:
    """MetricReport per method on a labelled test stream."""
    cal = model.calibration
    scores = stream_scores(model, stream, engine=engine)
    correct = scores["pred"] == stream.y
    m = cal.get("window", stream.spec.window)
    events = label_events(correct, m, tuple(cal["band"]))
    labels = frame_labels(events, len(stream))
    weights = M.event_weights(events, len(stream))
    reports = {}
    for name in methods:
        if name not in scores:
            continue
        s = scores[name]
        tau = cal["thresholds"].get(name, float(np.median(s)))
        try:
            ap = M.frame_auprc(s, labels)
            ap_w = M.frame_auprc(s, labels, weights)
            roc = M.auroc(s, labels)
            fpr = M.fpr_at_recall(s, labels, stream.clean_id)
        except UndefinedMetricError:
            ap = ap_w = roc = fpr = float("nan")
        med, miss, delays = M.delay_at_threshold(events, s, tau)

        def ap_metric(idx, s=s):
            return M.frame_auprc(s[idx], labels[idx])

        def delay_metric(idx, delays=np.asarray(delays)):
            d = delays[idx]
            d = d[~np.isnan(d)]
            return float(np.median(d)) if d.size else float("nan")

        ci = M.bootstrap_ci(ap_metric, len(s), n_boot, seed) if labels.any() else {}
        dci = M.bootstrap_ci(delay_metric, len(delays), n_boot, seed) if delays else {}
        rep = M.MetricReport(
            method=name, auprc=ap, auprc_event_weighted=ap_w, auprc_ci=ci, auroc=roc,
            median_delay=med, delay_ci=dci, miss_rate=miss, fpr_at_recall=fpr,
            threshold=float(tau), n_events=len(events))
        if name == "snap":
            U = s
            rep.risk_coverage = M.risk_coverage(U, correct)
            tau_sel = cal["mapping"]["threshold"]
            try:
                rep.selective_nll = M.selective_nll(
                    scores["posteriors"][stream.y < model.spec.n_classes],
                    stream.y[stream.y < model.spec.n_classes],
                    U[stream.y < model.spec.n_classes], tau_sel)
            except UndefinedMetricError:
                pass
            idm = stream.y < model.spec.n_classes
            rep.calibration = M.calib_metrics(scores["posteriors"][idm], stream.y[idm])
        reports[name] = rep
    return {"reports": reports, "events": events, "labels": labels, "scores": scores}


def severity_curve(model: SnapModel, data: Datasets, seed: int, methods=("snap", "entropy"),
                   engine="float") -> dict:
    """Failure-detection AUPRC (positives: misclassified) per severity 0..5,
    averaged over corruption types, on the held-out test pool."""
    cfg = score_config_from_model(model)
    out = {m: [] for m in methods}
    err_rate = []
    for sev in range(6):
        per = {m: [] for m in methods}
        errs = []
        kinds = CORRUPTIONS if sev > 0 else CORRUPTIONS[:1]
        for ci, kind in enumerate(kinds):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 55, sev, ci]))
            x = corrupt(data.test.x, kind, sev, rng)
            sc = stream_scores(model, x, cfg, engine=engine)
            wrong = sc["pred"] != data.test.y
            errs.append(float(wrong.mean()))
            for mth in methods:
                try:
                    per[mth].append(M.frame_auprc(sc[mth], wrong))
                except UndefinedMetricError:
                    per[mth].append(0.0)
        for mth in methods:
            out[mth].append(float(np.mean(per[mth])))
        err_rate.append(float(np.mean(errs)))
    return {"severity": list(range(6)), "auprc": out, "error_rate": err_rate}


def nondecreasing_pairs(values) -> int:
    v = np.asarray(values)
    return int(np.sum(v[1:] >= v[:-1]))


def run_experiment(seed: int, kind="vector", stream_spec=None, n_boot=200,
                   train_cfg=None, mapping="logistic") -> dict:
    """Train, calibrate and evaluate one seed on the desk-scale stream."""
    data = make_datasets(seed, kind)
    model, records = train_model(data, seed, train_cfg)
    spec = stream_spec or StreamSpec(seed=seed)
    calibrate_model(model, data, seed, mapping=mapping, stream_spec=spec)
    _, test_stream = build_stream(_shift_seed(spec, 2), data.test, data.ood_test)
    ev = evaluate_stream(model, test_stream, n_boot=n_boot, seed=seed)
    sev = severity_curve(model, data, seed)
    return {"model": model, "data": data, "records": records, "stream": test_stream,
            "evaluation": ev, "severity": sev}
