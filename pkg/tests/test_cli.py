import json

import numpy as np
import pytest

from snapuq import cli, load_model


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    model = root / "m" / "model.snap"
    assert run("train", "--epochs", 2, "--seed", 13, "--out", model) == 0
    assert run("calibrate", "--model", model) == 0
    assert run("quantize", "--model", model, "--out", root / "q" / "model.snap") == 0
    assert run("stream", "--seed", 13, "--out", root / "s" / "st") == 0
    return root


def test_train_writes_model_log_and_manifest(pipeline):
    m = pipeline / "m"
    assert (m / "model.snap").exists()
    log = [json.loads(line) for line in (m / "model.log.jsonl").read_text().splitlines()]
    assert len(log) >= 2
    manifest = json.loads((m / "run_manifest.json").read_text())
    assert {"command", "config_hash", "seeds", "inputs", "outputs", "tool_version",
            "wall_clock_s"} <= set(manifest)


def test_calibrate_stores_mapping(pipeline):
    model = load_model(pipeline / "m" / "model.snap")
    cal = model.calibration
    assert cal["mapping"]["kind"] == "logistic"
    assert 0.0 < cal["mapping"]["threshold"] < 1.0


def test_score_float_and_int8(pipeline):
    out = pipeline / "sc" / "float.jsonl"
    assert run("score", "--model", pipeline / "q" / "model.snap", "--frames",
               pipeline / "s" / "st.frames", "--out", out) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 780 and all(0 <= r["U"] <= 1 for r in rows)
    out8 = pipeline / "sc" / "int8.jsonl"
    assert run("score", "--model", pipeline / "q" / "model.snap", "--frames",
               pipeline / "s" / "st.frames", "--engine", "int8", "--out", out8) == 0
    s_float = np.array([r["S"] for r in rows])
    s_int8 = np.array([json.loads(line)["S"] for line in out8.read_text().splitlines()])
    assert np.corrcoef(s_float, s_int8)[0, 1] > 0.99


def test_score_baseline_column(pipeline):
    out = pipeline / "sc" / "entropy.jsonl"
    assert run("score", "--model", pipeline / "m" / "model.snap", "--frames",
               pipeline / "s" / "st.frames", "--baseline", "entropy", "--out", out) == 0
    row = json.loads(out.read_text().splitlines()[0])
    assert row["score"] == row["score_entropy"]


def test_int8_on_float_only_model_is_artifact_error(pipeline, capsys):
    code = run("score", "--model", pipeline / "m" / "model.snap", "--frames",
               pipeline / "s" / "st.frames", "--engine", "int8", "--out",
               pipeline / "sc" / "x.jsonl")
    assert code == 4
    assert "quantised" in capsys.readouterr().err


def test_report_outputs(pipeline):
    rep = pipeline / "rep"
    assert run("report", "--model", pipeline / "q" / "model.snap", "--stream",
               pipeline / "s" / "st", "--n-boot", 30, "--out", rep) == 0
    for name in ("metrics.json", "severity.csv", "curves.csv", "severity.png", "pr.png",
                 "stream.png", "run_manifest.json"):
        assert (rep / name).stat().st_size > 0
    metrics = json.loads((rep / "metrics.json").read_text())
    assert {"snap", "entropy", "msp"} <= set(metrics["reports"])
    assert metrics["extra"]["int8_spearman_ok"] is True
    assert (rep / "pr.png").read_bytes()[:4] == b"\x89PNG"


def test_report_requires_calibration(tmp_path, pipeline):
    raw = tmp_path / "raw.snap"
    assert run("train", "--epochs", 1, "--out", raw) == 0
    assert run("report", "--model", raw, "--stream", pipeline / "s" / "st", "--out",
               tmp_path / "r") == 4


def test_label_free_calibration(tmp_path, pipeline):
    out = tmp_path / "lf.snap"
    assert run("calibrate", "--model", pipeline / "m" / "model.snap", "--label-free",
               "--out", out) == 0
    assert load_model(out).calibration["mapping"]["beta"][2] == 0.0


def test_isotonic_with_fixed_gamma(tmp_path, pipeline):
    out = tmp_path / "iso.snap"
    assert run("calibrate", "--model", pipeline / "m" / "model.snap", "--mapping", "isotonic",
               "--gamma", 0.3, "--out", out) == 0
    mapping = load_model(out).calibration["mapping"]
    assert mapping["kind"] == "isotonic" and mapping["gamma"] == 0.3
    assert np.all(np.diff(mapping["values"]) >= 0)


def test_calibrate_is_deterministic(tmp_path, pipeline):
    outs = []
    for name in ("a.snap", "b.snap"):
        assert run("calibrate", "--model", pipeline / "m" / "model.snap", "--out",
                   tmp_path / name) == 0
        outs.append(load_model(tmp_path / name).calibration)
    assert outs[0] == outs[1]


def test_stream_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("stream", "--seed", 3, "--out", tmp_path / name) == 0
    assert (tmp_path / "a.frames").read_bytes() == (tmp_path / "b.frames").read_bytes()


def test_bad_tap_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("taps = 9\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "m.snap") == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "m.snap") == 2


def test_corrupt_container_exits_4(tmp_path):
    bad = tmp_path / "bad.snap"
    bad.write_bytes(b"garbage")
    assert run("quantize", "--model", bad) == 4


def test_selftest_passes():
    assert run("selftest") == 0
