"""Command-line entry point: ``snapuq <command> [options]``.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric
error, 4 incompatible or malformed artifacts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import config as cfgio
from . import pipeline as pl
from .errors import (
    ArgumentError,
    ConfigError,
    FitError,
    FormatError,
    IncompatibleArtifactError,
    NumericError,
    SnapError,
)
from .model import build_model, load_model, save_model
from .nnet import forward_collect
from .quantize import quantize_model, report_overhead
from .scorer import records_from_arrays, score_arrays, score_config_from_model
from .streamlab import metrics as M
from .streamlab.data import make_datasets
from .streamlab.stream import StreamSpec, build_stream, read_frames, read_stream, write_stream
from .trainer import TrainConfig, train

log = logging.getLogger("snapuq")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ARTIFACT = 0, 1, 2, 3, 4
RUN_KEYS = {"dataset": "vector", "taps": None, "ranks": None}


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def write_manifest(out_dir, command, args, seeds, inputs, outputs, config_text="", started=None):
    """One ``run_manifest.json`` per output directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest()[:16],
        "seeds": list(seeds),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": _version(),
        "wall_clock_s": None if started is None else round(time.time() - started, 3),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "options": {k: v for k, v in vars(args).items() if k != "func"},
    }
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2, default=str)


# ------------------------------------------------------------------- train

def _train_settings(args):
    values = cfgio.read_kv(args.config) if args.config else {}
    run = {k: values.pop(k, v) for k, v in RUN_KEYS.items()}
    overrides = {"seed": args.seed, "epochs": args.epochs, "lambda_ss": args.lambda_ss}
    for k, v in overrides.items():
        if v is not None:
            values[k] = v
    if args.dataset:
        run["dataset"] = args.dataset
    if run["dataset"] not in ("vector", "glyph"):
        raise ConfigError(f"unknown dataset {run['dataset']!r}")
    seed = int(values.get("seed", 13))
    defaults = pl.default_train_config(run["dataset"], seed)
    merged = {f: getattr(defaults, f) for f in defaults.__dataclass_fields__}
    merged.update({k: v for k, v in values.items()})
    cfg = cfgio.build(TrainConfig, merged)
    spec, ranks = pl.default_backbone(run["dataset"])
    if run["taps"] is not None:
        taps = tuple(int(t) for t in str(run["taps"]).split(",") if t.strip())
        spec = replace(spec, taps=taps)
    if run["ranks"] is not None:
        ranks = tuple(int(r) for r in str(run["ranks"]).split(",") if r.strip())
    spec.validate()
    if len(ranks) != len(spec.taps):
        raise ConfigError("need one rank per tap")
    text = cfgio.dump(cfg) + f"dataset = {run['dataset']}\ntaps = {spec.taps}\nranks = {ranks}\n"
    return cfg, spec, ranks, run["dataset"], text


def cmd_train(args) -> int:
    started = time.time()
    cfg, spec, ranks, dataset, text = _train_settings(args)
    data = make_datasets(cfg.seed, dataset)
    model = build_model(spec, ranks, np.random.default_rng(cfg.seed), density=cfg.density)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    records = train(model, data.train.x, data.train.y, cfg, dev=(data.dev.x, data.dev.y),
                    log_path=log_path)
    model.meta.update({"seed": cfg.seed, "dataset": dataset, "train_config": text})
    save_model(model, out)
    _, post = forward_collect(model.backbone, data.test.x)
    acc = float(np.mean(post.argmax(1) == data.test.y))
    print(f"trained {len(records)} epochs; test accuracy {acc:.4f}; wrote {out}")
    write_manifest(out.parent, "train", args, [cfg.seed], [args.config or ""], [out, log_path],
                   text, started)
    return EXIT_OK


# --------------------------------------------------------------- calibrate

def _data_for(model, args):
    seed = args.seed if getattr(args, "seed", None) is not None else model.meta.get("seed", 13)
    return int(seed), make_datasets(int(seed), model.meta.get("dataset", "vector"))


def cmd_calibrate(args) -> int:
    started = time.time()
    model = load_model(args.model).astype(np.float64)
    seed, data = _data_for(model, args)
    spec = StreamSpec.full(seed) if args.full_lengths else StreamSpec(seed=seed)
    res = pl.calibrate_model(model, data, seed, mapping=args.mapping,
                             label_free=args.label_free, gamma=args.gamma, alpha=args.alpha,
                             stream_spec=spec)
    out = Path(args.out or args.model)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    print(f"temperature T = {res.temperature}")
    print(f"energy temperature = {res.energy_temperature}")
    print(f"layer weights w = {list(res.weights)}")
    print(f"mapping = {res.mapping.to_json()}")
    print(f"threshold tau* = {res.mapping.threshold}")
    write_manifest(out.parent, "calibrate", args, [seed], [args.model], [out],
                   res.mapping.to_json(), started)
    return EXIT_OK


# ---------------------------------------------------------------- quantize

def cmd_quantize(args) -> int:
    started = time.time()
    model = load_model(args.model).astype(np.float64)
    seed, data = _data_for(model, args)
    trace, _ = forward_collect(model.backbone, data.dev.x)
    model.quant = quantize_model(model, trace)
    out = Path(args.out or args.model)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    ov = report_overhead(model.spec, model.heads)
    print(json.dumps(ov, indent=2, sort_keys=True))
    write_manifest(out.parent, "quantize", args, [seed], [args.model], [out], "", started)
    return EXIT_OK


# ------------------------------------------------------------------ stream

def cmd_stream(args) -> int:
    started = time.time()
    values = cfgio.read_kv(args.config) if args.config else {}
    base = StreamSpec.full(args.seed) if args.full_lengths else StreamSpec(seed=args.seed)
    values.setdefault("seed", str(args.seed))
    spec = cfgio.build(StreamSpec, {**{k: getattr(base, k) for k in base.__dataclass_fields__},
                                    **values})
    need_id = spec.id_len + (spec.n_bursts + 1) * spec.cid_len
    need_ood = spec.n_bursts * spec.ood_len
    data = make_datasets(spec.seed, args.dataset, n_dev=max(1000, need_id),
                         n_test=max(1000, need_id), n_ood=max(300, need_ood))
    id_pool, ood_pool = (data.dev, data.ood_dev) if args.split == "dev" else \
        (data.test, data.ood_test)
    frames, labeled = build_stream(replace(spec, seed=spec.seed + (1000 if args.split == "dev"
                                                                     else 2000)),
                                   id_pool, ood_pool)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_stream(prefix, frames, labeled)
    print(f"wrote {len(frames)} frames to {prefix}.frames and truth to {prefix}.truth.json")
    write_manifest(prefix.parent, "stream", args, [spec.seed], [],
                   [f"{prefix}.frames", f"{prefix}.truth.json"], cfgio.dump(spec), started)
    return EXIT_OK


# ------------------------------------------------------------------- score

def cmd_score(args) -> int:
    started = time.time()
    model = load_model(args.model).astype(np.float64)
    if args.engine == "int8" and model.quant is None:
        raise IncompatibleArtifactError("int8 engine requested but the container is not quantised")
    x = read_frames(args.frames)
    cfg = score_config_from_model(model)
    arr = score_arrays(model, x, cfg, engine=args.engine)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for rec in records_from_arrays(arr):
            d = json.loads(rec.to_json())
            if args.baseline:
                d["score"] = d.get(f"score_{args.baseline}")
                if d["score"] is None:
                    raise ArgumentError(f"baseline {args.baseline} is not available")
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    print(f"scored {len(arr['S'])} frames with the {args.engine} engine -> {out}")
    write_manifest(out.parent, "score", args, [model.meta.get("seed", 0)],
                   [args.model, args.frames], [out], "", started)
    return EXIT_OK


# ------------------------------------------------------------------ report

def _write_curves(out_dir, ev):
    labels = ev["labels"]
    rows = []
    for name, s in ev["scores"].items():
        if name not in pl.METHODS or not labels.any():
            continue
        thr, prec, rec = M.pr_curve(s, labels)
        for t, p, r in zip(thr, prec, rec):
            rows.append(("pr", name, t, p, r))
        try:
            rthr, fpr, tpr = M.roc_curve(s, labels)
        except Exception:
            continue
        for t, f, tp in zip(rthr, fpr, tpr):
            rows.append(("roc", name, t, f, tp))
    with open(out_dir / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "method", "threshold", "x_or_precision", "y_or_recall"])
        w.writerows(rows)


def cmd_report(args) -> int:
    started = time.time()
    from . import plotting
    model = load_model(args.model).astype(np.float64)
    if not model.calibration:
        raise IncompatibleArtifactError("model has no calibration; run `calibrate` first")
    if args.engine == "int8" and model.quant is None:
        raise IncompatibleArtifactError("int8 engine requested but the container is not quantised")
    stream = read_stream(args.stream)
    seed, data = _data_for(model, args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ev = pl.evaluate_stream(model, stream, n_boot=args.n_boot, seed=seed, engine=args.engine)
    reports = {k: v.to_dict() for k, v in ev["reports"].items()}
    extra = {"engine": args.engine, "n_frames": len(stream),
             "events": [[e.onset, e.offset] for e in ev["events"]],
             "overhead": report_overhead(model.spec, model.heads)}
    if model.quant is not None:
        from scipy.stats import spearmanr
        f = pl.stream_scores(model, stream, engine="float")["ebar"]
        q = pl.stream_scores(model, stream, engine="int8")["ebar"]
        rho = [float(spearmanr(f[:, i], q[:, i]).correlation) for i in range(f.shape[1])]
        extra["int8_spearman"] = rho
        extra["int8_spearman_ok"] = bool(min(rho) >= 0.99)
    sev = pl.severity_curve(model, data, seed, methods=("snap", "entropy"), engine=args.engine)
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump({"reports": reports, "extra": extra, "severity": sev}, fh,
                  sort_keys=True, indent=2, default=float)
    with open(out_dir / "severity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["severity", "error_rate", *sev["auprc"].keys()])
        for i, s in enumerate(sev["severity"]):
            w.writerow([s, sev["error_rate"][i], *[v[i] for v in sev["auprc"].values()]])
    _write_curves(out_dir, ev)
    figs = [plotting.plot_severity(sev, out_dir / "severity.png")]
    if ev["labels"].any():
        curves = {}
        for name in ("snap", "entropy", "msp", "maha"):
            if name in ev["scores"]:
                _, p, r = M.pr_curve(ev["scores"][name], ev["labels"])
                curves[name] = (p, r)
        figs.append(plotting.plot_pr(curves, out_dir / "pr.png"))
    if "snap" in ev["reports"] and ev["reports"]["snap"].risk_coverage:
        figs.append(plotting.plot_risk_coverage(ev["reports"]["snap"].risk_coverage,
                                                out_dir / "risk_coverage.png"))
    key = "snap" if "snap" in ev["scores"] else "snap_S"
    figs.append(plotting.plot_stream(ev["scores"][key], ev["labels"], stream.regime,
                                     out_dir / "stream.png",
                                     tau=model.calibration["thresholds"].get(key)))
    print(f"{'method':<8} {'AUPRC':>7} {'AUROC':>7} {'delay':>6} {'miss':>5}")
    for name, r in ev["reports"].items():
        print(f"{name:<8} {r.auprc:7.4f} {r.auroc:7.4f} {r.median_delay:6.1f} {r.miss_rate:5.2f}")
    if "int8_spearman" in extra:
        print(f"int8 vs float Spearman per tap: {extra['int8_spearman']} "
              f"(>= 0.99: {extra['int8_spearman_ok']})")
    write_manifest(out_dir, "report", args, [seed], [args.model, args.stream],
                   ["metrics.json", "severity.csv", "curves.csv", *map(os.path.basename, figs)],
                   "", started)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all
    return EXIT_OK if run_all() else EXIT_FAIL


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snapuq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train backbone and tap heads")
    t.add_argument("--config", help="key = value training config")
    t.add_argument("--dataset", choices=("vector", "glyph"))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lambda-ss", type=float, dest="lambda_ss")
    t.add_argument("--out", required=True, help="output model container")
    t.add_argument("--log", help="JSON-lines training log (default: next to --out)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="fit mapping, baselines and thresholds")
    c.add_argument("--model", required=True)
    c.add_argument("--out")
    c.add_argument("--seed", type=int)
    c.add_argument("--mapping", choices=("logistic", "isotonic"), default="logistic")
    c.add_argument("--label-free", action="store_true", dest="label_free")
    c.add_argument("--gamma", type=float)
    c.add_argument("--alpha", type=float, default=0.5)
    c.add_argument("--full-lengths", action="store_true", dest="full_lengths")
    c.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("quantize", help="append int8 heads and the sigma LUT")
    q.add_argument("--model", required=True)
    q.add_argument("--out")
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_quantize)

    s = sub.add_parser("stream", help="generate a corrupted stream")
    s.add_argument("--dataset", choices=("vector", "glyph"), default="vector")
    s.add_argument("--seed", type=int, default=13)
    s.add_argument("--config", help="key = value stream spec")
    s.add_argument("--split", choices=("dev", "test"), default="test")
    s.add_argument("--full-lengths", action="store_true", dest="full_lengths")
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_stream)

    sc = sub.add_parser("score", help="score frames, one JSON record per line")
    sc.add_argument("--model", required=True)
    sc.add_argument("--frames", required=True)
    sc.add_argument("--engine", choices=("float", "int8"), default="float")
    sc.add_argument("--baseline", choices=("msp", "temp", "entropy", "energy", "maha"))
    sc.add_argument("--out", required=True)
    sc.set_defaults(func=cmd_score)

    r = sub.add_parser("report", help="metrics, curves and figures for a labelled stream")
    r.add_argument("--model", required=True)
    r.add_argument("--stream", required=True, help="stream prefix (frames + truth)")
    r.add_argument("--engine", choices=("float", "int8"), default="float")
    r.add_argument("--seed", type=int)
    r.add_argument("--n-boot", type=int, default=1000, dest="n_boot")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_report)

    st = sub.add_parser("selftest", help="run the invariant checks")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, default=str, indent=2), file=sys.stderr)
        return EXIT_NUMERIC
    except (IncompatibleArtifactError, FormatError) as exc:
        print(f"incompatible artifact: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (FitError, ArgumentError, SnapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
