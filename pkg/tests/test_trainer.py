import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snapuq import build_model, forward_collect, mlp_spec
from snapuq.errors import ConfigError, NumericError
from snapuq.heads import head_forward, init_head, surprisal_diag
from snapuq.model import SnapModel
from snapuq.nnet import Backbone
from snapuq.trainer import (
    TrainConfig,
    TrainState,
    balance_lambda,
    clip_gradients,
    compute_gradients,
    fit_head_on_pairs,
    fit_layer_weights,
    layer_weights,
    regularizer,
    ss_loss,
    train,
    train_step,
)


def tiny_model(seed=0, taps=(2, 3), ranks=(2, 2)):
    spec = mlp_spec(d_in=3, n_classes=3, widths=(4, 3, 3), taps=taps)
    model = build_model(spec, ranks, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    for h in model.heads:
        h.Wxi[:] = rng.normal(size=h.Wxi.shape) * 0.5
        h.bmu[:] = rng.normal(size=h.bmu.shape) * 0.1
        # keep log-variances away from the |s| kink at zero
        h.bxi[:] = rng.uniform(1.0, 2.0, size=h.bxi.shape)
    return model


def blob_data(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, size=n)
    centres = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    return centres[y] + 0.3 * rng.normal(size=(n, 3)), y


def test_ss_loss_worked_example():
    # one head with identity-free weights: mu = 0, s = 0, so loss = 0.5 * sum a^2 / d
    head = init_head(2, 2, 2, 1, np.random.default_rng(0))
    head.Wmu[:] = 0
    head.Wxi[:] = 0
    head.bxi[:] = np.log(np.expm1(1.0 - 1e-8))

    class Trace:
        def vector(self, k):
            return np.array([[1.0, 1.0]]) if k == 1 else np.array([[1.0, 2.0]])

    assert ss_loss(Trace(), [head], [1.0]) == pytest.approx(0.5 * 5 / 2, abs=1e-12)


def test_regularizer_worked_example():
    head = init_head(2, 2, 2, 1, np.random.default_rng(0))
    for name in ("P", "Wmu", "Wxi"):
        getattr(head, name)[:] = 1.0
    s = [np.array([[1.0, -2.0], [3.0, 0.0]])]
    # mean_n sum|s| = (3 + 3) / 2 = 3; sum theta^2 = 2 + 2 + 2 = 6
    assert regularizer([head], s, alpha_var=0.1, alpha_wd=0.01) == pytest.approx(0.3 + 0.06)


@pytest.mark.parametrize("lam,rho,expected", [
    (5e-3, 0.2, 2.5e-3), (5e-3, 0.05, 1e-2), (1e-3, 1e3, 1e-4), (5e-3, 0.0, 5e-3),
    (5e-3, 0.1, 5e-3)])
def test_balance_lambda_examples(lam, rho, expected):
    assert balance_lambda(lam, rho) == pytest.approx(expected)


@given(st.floats(1e-4, 1e-2), st.floats(0, 1e6))
def test_balance_lambda_stays_in_bounds(lam, rho):
    out = balance_lambda(lam, rho)
    assert 1e-4 <= out <= 1e-2


def test_fit_layer_weights_inverse_variance():
    rng = np.random.default_rng(0)
    base = rng.normal(size=5000)
    ebars = np.stack([base, 2.0 * base], axis=1)
    omega, w, fallback = fit_layer_weights(ebars)
    np.testing.assert_allclose(w, [0.8, 0.2])
    np.testing.assert_allclose(omega, [1.6, 0.4])
    assert not fallback


def test_fit_layer_weights_falls_back_on_zero_variance():
    ebars = np.column_stack([np.ones(10), np.arange(10.0)])
    omega, w, fallback = fit_layer_weights(ebars)
    assert fallback and np.allclose(w, 0.5) and np.allclose(omega, 1.0)


def test_layer_weights_normalised_to_tap_count():
    cfg = TrainConfig(omega=(1.0, 3.0))
    np.testing.assert_allclose(layer_weights(cfg, 2), [0.5, 1.5])
    with pytest.raises(ConfigError):
        layer_weights(cfg, 3)


def _total_loss(model, x, y, cfg, lam):
    return compute_gradients(model, x, y, cfg, lam, detach=False)[0]["total"]


@pytest.mark.parametrize("density", ["diag", "student_t", "huber"])
def test_full_objective_gradient(density):
    model = tiny_model(1)
    x, y = blob_data(5, seed=1)
    cfg = TrainConfig(lambda_reg=0.0, density=density)
    lam = 0.7
    _, grads, _ = compute_gradients(model, x, y, cfg, lam, detach=False)
    params = model.param_dict()
    checked = 0
    worst = 0.0
    h = 1e-5
    for name, arr in params.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            vals = []
            for k in (2, 1, -1, -2):
                arr[idx] = old + k * h
                vals.append(_total_loss(model, x, y, cfg, lam))
            arr[idx] = old
            num = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            g = grads[name][idx]
            worst = max(worst, abs(num - g) / max(abs(num), abs(g), 1e-6))
            checked += 1
    assert checked >= 30
    assert worst <= 1e-5


def test_regularizer_gradient_on_heads():
    model = tiny_model(2)
    x, y = blob_data(6, seed=2)
    cfg = TrainConfig(lambda_reg=0.5, alpha_var=0.3, alpha_wd=0.2)
    lam = 0.4
    _, grads, _ = compute_gradients(model, x, y, cfg, lam, detach=True)
    worst = 0.0
    h = 1e-5
    for hd in model.heads:
        for name in ("P", "Wmu", "bmu", "Wxi", "bxi"):
            arr = getattr(hd, name)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                vals = []
                for k in (2, 1, -1, -2):
                    arr[idx] = old + k * h
                    vals.append(compute_gradients(model, x, y, cfg, lam, detach=True)[0]["total"])
                arr[idx] = old
                num = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
                g = grads[f"tap{hd.tap}.{name}"][idx]
                worst = max(worst, abs(num - g) / max(abs(num), abs(g), 1e-6))
    assert worst <= 1e-5


def test_regularizer_does_not_reach_backbone():
    model = tiny_model(3)
    x, y = blob_data(8, seed=3)
    base = compute_gradients(model, x, y, TrainConfig(lambda_reg=0.0), 0.0, detach=False)[1]
    with_reg = compute_gradients(model, x, y, TrainConfig(lambda_reg=1.0), 0.0, detach=False)[1]
    for k in model.backbone.params:
        np.testing.assert_array_equal(base[k], with_reg[k])


def test_detach_zeroes_auxiliary_backbone_gradient():
    model = tiny_model(4)
    x, y = blob_data(8, seed=4)
    cfg = TrainConfig(lambda_reg=0.0)
    clf_only = compute_gradients(model, x, y, cfg, 0.0, detach=False)[1]
    detached = compute_gradients(model, x, y, cfg, 0.5, detach=True)[1]
    attached = compute_gradients(model, x, y, cfg, 0.5, detach=False)[1]
    for k in model.backbone.params:
        np.testing.assert_array_equal(clf_only[k], detached[k])
    assert any(not np.allclose(clf_only[k], attached[k]) for k in model.backbone.params)
    aux = compute_gradients(model, x, y, cfg, 0.5, detach=True, include_clf=False)[1]
    assert all(not np.any(aux[k]) for k in model.backbone.params)


def test_separate_backward_matches_joint():
    model = tiny_model(5)
    x, y = blob_data(8, seed=5)
    cfg = TrainConfig(lambda_reg=0.0)
    _, joint, _ = compute_gradients(model, x, y, cfg, 0.3, detach=False)
    _, sep, extras = compute_gradients(model, x, y, cfg, 0.3, detach=False, separate=True)
    for k in joint:
        np.testing.assert_allclose(sep[k], joint[k], atol=1e-14)
    assert extras["clf_norm"] > 0 and extras["ss_norm"] > 0


def test_zero_lambda_is_bitwise_classifier_training():
    x, y = blob_data(96, seed=6)
    cfg = TrainConfig(lambda_ss=0.0, lambda_reg=0.0, epochs=3, batch_size=16, seed=9)
    with_heads = tiny_model(6)
    train(with_heads, x, y, cfg)

    plain = tiny_model(6)
    bare = SnapModel(Backbone(plain.spec, plain.backbone.params), [])
    train(bare, x, y, cfg)
    for k in bare.backbone.params:
        assert bare.backbone.params[k].tobytes() == with_heads.backbone.params[k].tobytes()


def test_clip_gradients_rescales_to_max_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    pre = clip_gradients(grads, 1.0)
    assert pre == pytest.approx(5.0)
    total = np.sqrt(sum(np.sum(g * g) for g in grads.values()))
    assert total == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    clip_gradients(small, 1.0)
    assert small["a"][0] == 0.1


def test_adaptive_balance_keeps_lambda_in_bounds(tmp_path):
    x, y = blob_data(128, seed=7)
    cfg = TrainConfig(balance="adaptive", epochs=3, batch_size=16, seed=1)
    records = train(tiny_model(7), x, y, cfg, dev=(x[:32], y[:32]),
                    log_path=tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 3
    for rec in map(json.loads, lines):
        assert 0.0 <= rec["lambda_ss"] <= cfg.lambda_max + 1e-15
        assert rec["rho"] >= 0
    assert records[-1].val_nll is not None


def test_ss_loss_decreases_on_linear_gaussian_dynamics():
    thirds = []
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        d_in, d = 6, 8
        W = rng.normal(size=(d, d_in)) / np.sqrt(d_in)
        sd = np.exp(rng.uniform(-1, 0, size=d))
        ap = rng.normal(size=(2000, d_in))
        a = ap @ W.T + sd * rng.normal(size=(2000, d))
        head = init_head(2, d_in, d, 6, np.random.default_rng(seed))
        losses = fit_head_on_pairs(head, ap, a, TrainConfig(epochs=15, lr=5e-3, seed=seed))
        thirds.append([np.mean(losses[i:i + 5]) for i in (0, 5, 10)])
    med = np.median(np.array(thirds), axis=0)
    assert med[0] > med[1] > med[2]


def test_nonfinite_loss_raises_with_diagnostics():
    model = tiny_model(8)
    x, y = blob_data(8, seed=8)
    x[0, 0] = np.inf
    cfg = TrainConfig()
    state = TrainState(lam=cfg.lambda_ss, total_steps=4)
    with pytest.raises(NumericError) as exc:
        train_step(model, x, y, cfg, state)
    assert "param_norms" in exc.value.diagnostics and exc.value.diagnostics["step"] == 0


@pytest.mark.parametrize("bad", [dict(clip_norm=0.0), dict(optimizer="rmsprop"),
                                 dict(detach="maybe"), dict(balance="adaptive", lambda_ss=1.0),
                                 dict(omega=(-1.0,)), dict(epochs=0), dict(ema=0.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


def test_training_improves_classifier_and_is_seeded():
    x, y = blob_data(300, seed=9)
    cfg = TrainConfig(epochs=20, batch_size=32, lr=3e-2, seed=3)
    m1, m2 = tiny_model(9), tiny_model(9)
    r1 = train(m1, x, y, cfg)
    train(m2, x, y, cfg)
    assert r1[-1].clf_loss < r1[0].clf_loss
    for k, v in m1.param_dict().items():
        assert v.tobytes() == m2.param_dict()[k].tobytes()
    _, post = forward_collect(m1.backbone, x)
    assert np.mean(post.argmax(1) == y) > 0.9


def test_sgd_optimizer_runs():
    x, y = blob_data(64, seed=10)
    cfg = TrainConfig(optimizer="sgd", lr=0.05, epochs=2, batch_size=16)
    recs = train(tiny_model(10), x, y, cfg)
    assert all(np.isfinite(r.clf_loss) for r in recs)


def test_auto_detach_triggers_after_stall():
    x, y = blob_data(64, seed=11)
    cfg = TrainConfig(detach="auto", detach_after=2, detach_patience=1, epochs=6,
                      lr=1e-9, lr_min=1e-12, batch_size=64)
    recs = train(tiny_model(11), x, y, cfg, dev=(x, y))
    assert recs[-1].detached
    assert not recs[0].detached


def test_inverse_variance_mode_uses_dev_ebars():
    x, y = blob_data(64, seed=12)
    cfg = TrainConfig(omega_mode="inverse_variance", epochs=2, batch_size=32)
    model = tiny_model(12)
    train(model, x, y, cfg, dev=(x, y))
    trace, _ = forward_collect(model.backbone, x)
    for h in model.heads:
        out = head_forward(h, trace.vector(h.tap - 1) @ h.P.T)
        assert np.all(np.isfinite(surprisal_diag(trace.vector(h.tap), out)[1]))
