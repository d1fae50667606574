import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from snapuq.calibrate import (
    BudgetState,
    MappingParams,
    balanced_logloss,
    budget_step,
    coverage,
    fit_isotonic_mapping,
    fit_isotonic_pav,
    fit_logistic,
    fit_temperature,
    map_uncertainty,
    nll_at_temperature,
    pav,
    run_budget,
    select_threshold_coverage,
    select_threshold_f1,
)
from snapuq.errors import ArgumentError, FitError, StateError


# ------------------------------------------------------------ temperature

def test_temperature_recovers_generating_scale():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4000, 4)) * 3.0
    p = np.exp(logits / 2.0)
    p /= p.sum(1, keepdims=True)
    labels = np.array([rng.choice(4, p=row) for row in p])
    assert fit_temperature(logits, labels) == 2.0


def test_temperature_tie_prefers_smaller():
    logits = np.zeros((5, 3))
    labels = np.zeros(5, dtype=int)
    assert fit_temperature(logits, labels) == 0.5
    assert nll_at_temperature(logits, labels, 1.0) == pytest.approx(np.log(3))


# ---------------------------------------------------------------- logistic

def _logistic_data(n=3000, seed=0):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=n)
    m = rng.uniform(size=n)
    z = -1.0 + 2.0 * S + 1.5 * m
    err = (rng.uniform(size=n) < 1 / (1 + np.exp(-z))).astype(float)
    return S, m, err


def test_logistic_is_a_stationary_point():
    S, m, err = _logistic_data()
    beta = fit_logistic(S, m, err)
    eps = 1e-5
    base = balanced_logloss(S, m, err, beta) + 0.5e-4 * (beta[1] ** 2 + beta[2] ** 2)
    for i in range(3):
        for sign in (1, -1):
            b = list(beta)
            b[i] += sign * eps
            other = balanced_logloss(S, m, err, b) + 0.5e-4 * (b[1] ** 2 + b[2] ** 2)
            assert other >= base - 1e-12
    assert beta[1] > 1.5 and beta[2] > 0.8


def test_logistic_label_free_pins_confidence_weight():
    S, m, err = _logistic_data()
    beta = fit_logistic(S, m, err, label_free=True)
    assert beta[2] == 0.0
    assert beta[1] > 0


def test_logistic_single_class_raises():
    with pytest.raises(FitError):
        fit_logistic(np.arange(4.0), np.zeros(4), np.zeros(4))


def test_logistic_separable_data_stays_finite():
    S = np.r_[np.linspace(-2, -1, 20), np.linspace(1, 2, 20)]
    err = np.r_[np.zeros(20), np.ones(20)]
    beta = fit_logistic(S, np.zeros(40), err)
    assert all(np.isfinite(beta))
    u = map_uncertainty(S, np.zeros(40), MappingParams("logistic", beta=beta))
    assert np.all(u[20:] > 0.9) and np.all(u[:20] < 0.1)


def test_map_requires_fitted_mapping():
    with pytest.raises(StateError):
        map_uncertainty([0.1], [0.1], None)
    with pytest.raises(StateError):
        map_uncertainty([0.1], [0.1], MappingParams("isotonic"))


@given(arrays(np.float64, 8, elements=st.floats(-10, 10)),
       st.floats(0.01, 5), st.floats(0.0, 5))
def test_logistic_map_is_monotone_in_S(S, b1, b2):
    mp = MappingParams("logistic", beta=(0.3, b1, b2))
    order = np.argsort(S)
    u = map_uncertainty(S[order], np.full(8, 0.4), mp)
    assert np.all(np.diff(u) >= 0)
    assert np.all((u >= 0) & (u <= 1))


def test_mapping_params_roundtrip():
    mp = MappingParams("isotonic", breakpoints=(0.0, 1.0), values=(0.1, 0.7), gamma=0.5,
                       threshold=0.4, fitted_on={"n": 3})
    back = MappingParams.from_dict(json.loads(mp.to_json()))
    assert back == mp
    with pytest.raises(ArgumentError):
        MappingParams("isotonic", breakpoints=(1.0, 0.0), values=(0.1, 0.7)).validate()


# ---------------------------------------------------------------- isotonic

@pytest.mark.parametrize("n", range(1, 9))
def test_pav_matches_exhaustive_search(n):
    for bits in itertools.product((0.0, 1.0), repeat=n):
        y = np.array(bits)
        ref, ref_sse = oracles.brute_isotonic(y)
        fit = pav(y)
        np.testing.assert_allclose(fit, ref, atol=1e-10)
        assert np.sum((fit - y) ** 2) == pytest.approx(ref_sse, abs=1e-10)


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-5, 5)))
def test_pav_monotone_and_mean_preserving(y):
    fit = pav(y)
    assert np.all(np.diff(fit) >= -1e-12)
    assert fit.sum() == pytest.approx(y.sum(), abs=1e-9)


def test_isotonic_hand_example():
    f = fit_isotonic_pav([1.0, 2.0], [0.0, 1.0])
    # right-continuous steps; first level below range; clipped into (0, 1)
    assert f(1.5) == pytest.approx(1e-4)
    assert f(2.5) == pytest.approx(1 - 1e-4)
    assert f(0.0) == pytest.approx(1e-4)
    assert f(2.0) == pytest.approx(1 - 1e-4)


def test_isotonic_ties_pooled_first():
    f = fit_isotonic_pav([0.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 1.0], clip=0.0)
    np.testing.assert_allclose(f.breakpoints, [0.0, 1.0])
    np.testing.assert_allclose(f.values, [1 / 3, 1.0])


def test_isotonic_mapping_gamma_selection():
    rng = np.random.default_rng(0)
    S = rng.normal(size=400)
    m = rng.uniform(size=400)
    err = (S > 0.5).astype(float)
    mp = fit_isotonic_mapping(S, m, err)
    assert mp.gamma == 1.0
    err_m = (m > 0.7).astype(float)
    assert fit_isotonic_mapping(S, m, err_m).gamma == 0.0
    fixed = fit_isotonic_mapping(S, m, err, gamma=0.25)
    assert fixed.gamma == 0.25
    mp.validate()
    u = map_uncertainty(S, m, mp)
    assert np.all((u >= 1e-4) & (u <= 1 - 1e-4))


# -------------------------------------------------------------- thresholds

@given(st.lists(st.integers(0, 6), min_size=2, max_size=25), st.data())
def test_f1_threshold_matches_brute_force(levels, data):
    scores = np.array(levels, dtype=float) / 6.0
    labels = np.array(data.draw(st.lists(st.booleans(), min_size=len(scores),
                                         max_size=len(scores))))
    if not labels.any():
        with pytest.raises(FitError):
            select_threshold_f1(scores, labels)
        return
    tau = select_threshold_f1(scores, labels)
    ref_tau, _ = oracles.brute_f1_threshold(scores.tolist(), labels)
    assert tau == ref_tau


@given(arrays(np.float64, st.integers(1, 30), elements=st.integers(0, 10).map(float)),
       st.floats(0.01, 1.0))
def test_coverage_threshold_matches_brute_force(U, kappa):
    tau = select_threshold_coverage(U, kappa)
    ref_tau, ref_cov = oracles.brute_coverage_threshold(U, kappa)
    assert coverage(U, tau) == pytest.approx(ref_cov)
    assert coverage(U, tau) >= kappa - 1e-12


def test_coverage_threshold_full_coverage_accepts_all():
    U = np.array([0.2, 0.9, 0.9])
    tau = select_threshold_coverage(U, 1.0)
    assert coverage(U, tau) == 1.0 and tau > 0.9


def test_coverage_threshold_rejects_bad_kappa():
    with pytest.raises(ArgumentError):
        select_threshold_coverage([0.1], 0.0)
    with pytest.raises(ArgumentError):
        select_threshold_coverage([], 0.5)


# ------------------------------------------------------------------ budget

def test_budget_step_worked_example():
    st0 = BudgetState(budget=0.1, eta=0.5, kappa=0.2, tau=0.5, rate=0.0)
    abstain, st1 = budget_step(st0, 0.7)
    assert abstain
    assert st1.rate == pytest.approx(0.5)
    assert st1.tau == pytest.approx(0.5 + 0.2 * 0.4)
    abstain, st2 = budget_step(st1, 0.1)
    assert not abstain
    assert st2.rate == pytest.approx(0.25)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=200), st.floats(0.01, 0.99))
def test_budget_threshold_stays_in_unit_interval(U, b):
    _, taus, final = run_budget(U, BudgetState(budget=b, kappa=5.0, eta=0.5))
    assert np.all((taus >= 0) & (taus <= 1))
    assert 0 <= final.tau <= 1


@pytest.mark.parametrize("b", [0.05, 0.2, 0.4])
def test_budget_monte_carlo(b):
    rates = []
    for seed in range(5):
        U = np.random.default_rng(seed).uniform(size=20_000)
        decisions, _, _ = run_budget(U, BudgetState(budget=b))
        rates.append(decisions[5000:].mean())
    assert abs(np.mean(rates) - b) <= 0.02


def test_budget_validation():
    with pytest.raises(ArgumentError):
        run_budget([0.5], BudgetState(budget=1.5))
