import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from snapuq.errors import ArgumentError, ConfigError, InputError
from snapuq.nnet import (
    BackboneSpec,
    backbone_macs,
    clf_loss_grad,
    conv_spec,
    forward_collect,
    init_backbone,
    layer_shapes,
    mlp_spec,
    softmax,
    stable_logsumexp,
)


def test_mlp_forward_matches_naive(rng):
    spec = mlp_spec(d_in=5, n_classes=3, widths=(7, 6), taps=(2,))
    bb = init_backbone(spec, rng)
    for p in bb.params.values():
        p[:] = rng.normal(size=p.shape)
    x = rng.normal(size=(4, 5))
    trace, post = forward_collect(bb, x)
    for i in range(4):
        ref = oracles.naive_mlp({k: v.tolist() for k, v in bb.params.items()}, x[i], 2)
        np.testing.assert_allclose(post[i], ref, atol=1e-12)
    assert len(trace.acts) == 3
    assert np.all(trace.acts[1] >= 0)


def test_conv_forward_matches_naive(rng):
    spec = conv_spec(n_classes=3, channels=(2, 3, 4), strides=(1, 2, 2),
                     input_shape=(1, 7, 7), taps=(2, 3))
    bb = init_backbone(spec, rng)
    for p in bb.params.values():
        p[:] = rng.normal(size=p.shape) * 0.5
    x = rng.normal(size=(2, 1, 7, 7))
    trace, post = forward_collect(bb, x)
    for i in range(2):
        np.testing.assert_allclose(post[i], oracles.naive_conv_net(bb.params, x[i], (1, 2, 2)),
                                   atol=1e-12)
    assert [a.shape[1:] for a in trace.acts[1:]] == [s for s in layer_shapes(spec)[1:]]
    np.testing.assert_allclose(trace.pooled[2], trace.acts[2].mean(axis=(2, 3)))


@pytest.mark.parametrize("kind", ["mlp", "conv"])
def test_classifier_gradient_finite_difference(kind, rng):
    if kind == "mlp":
        spec = mlp_spec(d_in=4, n_classes=3, widths=(5, 4), taps=(2,))
        x = rng.normal(size=(3, 4))
    else:
        spec = conv_spec(n_classes=3, channels=(2, 2), strides=(1, 2),
                         input_shape=(1, 5, 5), taps=(2,))
        x = rng.normal(size=(2, 1, 5, 5))
    bb = init_backbone(spec, rng)
    for p in bb.params.values():
        p[:] = rng.normal(size=p.shape) * 0.7
    y = rng.integers(0, 3, size=len(x))
    _, grads = clf_loss_grad(bb, x, y)
    h = 1e-6
    worst = 0.0
    for name, arr in bb.params.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = clf_loss_grad(bb, x, y)[0]
            arr[idx] = old - h
            dn = clf_loss_grad(bb, x, y)[0]
            arr[idx] = old
            num = (up - dn) / (2 * h)
            worst = max(worst, abs(num - grads[name][idx]) / max(abs(num), abs(grads[name][idx]),
                                                                  1e-6))
    assert worst <= 1e-5


@pytest.mark.parametrize("v", [[0.0], [1000.0, 1000.0], [-1000.0, 0.0], [1e-3, -2.0, 5.0],
                               [700.0, 700.0, -700.0]])
def test_logsumexp_cases(v):
    assert stable_logsumexp(v) == pytest.approx(oracles.logsumexp_exact(v), abs=1e-12)


def test_logsumexp_rejects_empty_and_nonfinite():
    with pytest.raises(ArgumentError):
        stable_logsumexp([])
    with pytest.raises(ArgumentError):
        stable_logsumexp([1.0, np.inf])


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-500, 500)))
def test_softmax_is_a_simplex(z):
    p = softmax(z)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert p[np.argmax(z)] == p.max()


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_logsumexp_shift_equivariance(v, c):
    assert stable_logsumexp(v + c) == pytest.approx(stable_logsumexp(v) + c, abs=1e-9)


def test_forward_is_deterministic(rng):
    spec = conv_spec()
    bb = init_backbone(spec, np.random.default_rng(1))
    x = rng.normal(size=(3, 1, 28, 28))
    _, p1 = forward_collect(bb, x)
    _, p2 = forward_collect(bb.copy(), x)
    assert p1.tobytes() == p2.tobytes()
    b2 = init_backbone(spec, np.random.default_rng(1))
    assert all(np.array_equal(b2.params[k], bb.params[k]) for k in bb.params)


def test_single_example_is_promoted(rng):
    bb = init_backbone(mlp_spec(), rng)
    x = rng.normal(size=16)
    _, p = forward_collect(bb, x)
    assert p.shape == (1, 4)


def test_input_shape_checked(rng):
    bb = init_backbone(mlp_spec(), rng)
    with pytest.raises(InputError):
        forward_collect(bb, rng.normal(size=(2, 15)))


def test_float32_posteriors_are_float64(rng):
    bb = init_backbone(mlp_spec(), rng).astype(np.float32)
    _, p = forward_collect(bb, rng.normal(size=(3, 16)))
    assert p.dtype == np.float64
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("taps", [(1,), (3, 2), (2, 2), (5,), ()])
def test_bad_taps_rejected(taps):
    with pytest.raises(ConfigError):
        mlp_spec(widths=(8, 8, 8, 8), taps=taps)


def test_spec_roundtrip():
    spec = conv_spec()
    assert BackboneSpec.from_dict(spec.to_dict()) == spec


def test_backbone_macs_by_hand():
    # 16*64 + 64*64 + 64*4
    assert backbone_macs(mlp_spec()) == 1024 + 4096 + 256


def test_clf_labels_checked(rng):
    bb = init_backbone(mlp_spec(), rng)
    with pytest.raises(ArgumentError):
        clf_loss_grad(bb, rng.normal(size=(2, 16)), np.array([0, 4]))
