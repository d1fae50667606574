import dataclasses

import numpy as np
import pytest

from snapuq import build_model, load_model, mlp_spec, save_model
from snapuq.config import build, dump, read_kv
from snapuq.container import MAGIC, decode, encode
from snapuq.errors import ConfigError, FormatError
from snapuq.streamlab import StreamSpec
from snapuq.trainer import TrainConfig


def test_container_roundtrip_all_dtypes():
    tensors = {
        "a": np.arange(6, dtype=np.float64).reshape(2, 3),
        "b": np.array([1.5], dtype=np.float32),
        "c": np.array([-3, 7], dtype=np.int32),
        "d": np.array([-128, 127], dtype=np.int8),
        "e": np.array([0, 65535], dtype=np.uint16),
    }
    buf = encode({"hello": [1, 2]}, tensors)
    assert buf[:8] == MAGIC
    manifest, back = decode(buf)
    assert manifest["hello"] == [1, 2]
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)
    assert all(rec["offset"] % 8 == 0 for rec in manifest["tensors"])


def test_container_encoding_is_canonical():
    t = {"x": np.ones(3)}
    assert encode({"b": 1, "a": 2}, t) == encode({"a": 2, "b": 1}, t)


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXXXXXX" + b[8:],
    lambda b: b[:10],
    lambda b: b[:-4],
    lambda b: b[:16] + b"\xff" + b[17:],
])
def test_container_rejects_damage(mutate):
    buf = encode({}, {"x": np.ones(4)})
    with pytest.raises(FormatError):
        decode(mutate(buf))


def test_container_rejects_unsupported_dtype():
    with pytest.raises(FormatError):
        encode({}, {"x": np.ones(2, dtype=np.complex128)})


@pytest.mark.parametrize("precision,tol", [("f64", 0.0), ("f32", 1e-6)])
def test_model_roundtrip(tmp_path, precision, tol):
    model = build_model(mlp_spec(), (32,), np.random.default_rng(0))
    model.meta["seed"] = 4
    path = tmp_path / "m.snap"
    save_model(model, path, precision=precision)
    back = load_model(path).astype(np.float64)
    assert back.spec == model.spec and back.meta["seed"] == 4
    for k, v in model.param_dict().items():
        np.testing.assert_allclose(back.param_dict()[k], v, rtol=tol, atol=tol)


def test_model_load_rejects_other_versions(tmp_path):
    p = tmp_path / "x.snap"
    p.write_bytes(encode({"format_version": 999}, {}))
    with pytest.raises(FormatError):
        load_model(p)


def test_read_kv_and_build(tmp_path):
    p = tmp_path / "train.cfg"
    p.write_text("# comment\nepochs = 3\nlr = 0.01  # inline\nomega = 0.25, 0.75\ndetach = auto\n\n")
    values = read_kv(p)
    assert values["lr"] == "0.01" and values["omega"] == "0.25, 0.75"
    cfg = build(TrainConfig, values)
    assert cfg.epochs == 3 and cfg.lr == 0.01
    assert cfg.omega == (0.25, 0.75) and cfg.detach == "auto"


def test_build_rejects_unknown_and_malformed(tmp_path):
    with pytest.raises(ConfigError):
        build(TrainConfig, {"epoch": "3"})
    with pytest.raises(ConfigError):
        build(TrainConfig, {"epochs": "three"})
    p = tmp_path / "bad.cfg"
    p.write_text("epochs 3\n")
    with pytest.raises(ConfigError):
        read_kv(p)


@pytest.mark.parametrize("obj", [TrainConfig(), StreamSpec(seed=9)])
def test_dump_roundtrip(tmp_path, obj):
    p = tmp_path / "c.cfg"
    p.write_text(dump(obj))
    back = build(type(obj), read_kv(p))
    assert dataclasses.asdict(back) == dataclasses.asdict(obj)
