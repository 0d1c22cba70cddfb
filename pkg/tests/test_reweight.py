from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from ecsynth.records import EvalMatrix, ScoredSample
from ecsynth.reweight import (
    FitOptions,
    RegressionParams,
    ReweightParams,
    _closed_form_alpha,
    baseline_residuals,
    calibrate_bias,
    fit,
    holdout_cv,
    objective,
    refit_regression_only,
    weight,
    weights_array,
    weights_for,
)
from ecsynth.simbench import PlantedSpec, generate


def _random_instance(rng, n_models=5, n_samples=20, n_metrics=2):
    chi = (rng.random((n_models, n_samples)) < 0.6).astype(float)
    v = rng.normal(0.0, 1.0, (n_models, n_metrics))
    matrix = EvalMatrix(
        model_ids=tuple(f"m{j}" for j in range(n_models)),
        sample_ids=tuple(f"s{i}" for i in range(n_samples)),
        chi=chi,
        live_metrics=v,
        metric_names=tuple(f"x{m}" for m in range(n_metrics)),
    )
    scores = [
        ScoredSample(f"s{i}", s_p=float(rng.normal(-2, 0.5)), s_f=float(rng.normal(-2, 0.5)))
        for i in range(n_samples)
    ]
    return matrix, scores


def test_weight_at_zero_theta_is_exact_center():
    params = ReweightParams()
    w = weight(params, ScoredSample("x", s_p=123.4, s_f=-567.8))
    assert w == 0.01 + 1.99 * 0.5
    assert w == 1.005


def test_weight_matches_reported_fitted_model_form():
    params = ReweightParams(theta_f=40.64, theta_p=-30.44, theta_b=-1.59)
    w = weight(params, ScoredSample("x", s_p=0.0, s_f=0.0))
    assert w == pytest.approx(0.01 + 1.99 * expit(-1.59), rel=1e-12)


def test_weight_saturates_toward_c_max_but_stays_inside():
    params = ReweightParams(theta_f=1e6)
    w = weight(params, ScoredSample("x", s_p=0.0, s_f=5.0))
    assert w < 2.0
    assert w == pytest.approx(2.0, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(
    st.tuples(*[st.floats(-100, 100) for _ in range(3)]),
    st.floats(-50, 50),
    st.floats(-50, 50),
)
def test_weight_strictly_inside_bounds(theta, s_f, s_p):
    params = ReweightParams(theta_f=theta[0], theta_p=theta[1], theta_b=theta[2])
    w = weight(params, ScoredSample("x", s_p=s_p, s_f=s_f))
    assert 0.01 < w < 2.0


def test_weight_monotone_in_scores():
    params = ReweightParams(theta_f=2.0, theta_p=1.0, theta_b=0.0)
    grid = np.linspace(-5, 5, 50)
    w_f = weights_array(params, grid, np.zeros_like(grid))
    w_p = weights_array(params, np.zeros_like(grid), grid)
    assert (np.diff(w_f) > 0).all()
    assert (np.diff(w_p) > 0).all()


def test_objective_reduces_to_total_variance_at_zero_slope():
    rng = np.random.default_rng(0)
    matrix, scores = _random_instance(rng)
    v = matrix.live_metrics
    params = ReweightParams(lam=0.0)
    alpha = RegressionParams(alpha_1=np.zeros(2), alpha_0=v.mean(axis=0))
    ev = objective(params, alpha, matrix, scores)
    total_var = float(((v - v.mean(axis=0)) ** 2).sum())
    assert ev.value == pytest.approx(total_var, rel=1e-12)
    np.testing.assert_allclose(ev.grad_alpha[0][1], 0.0, atol=1e-10)


def test_objective_regularizer_vanishes_at_uniform_weights():
    rng = np.random.default_rng(1)
    matrix, scores = _random_instance(rng)
    tf, tp, tb = ReweightParams.uniform_theta()
    params = ReweightParams(theta_f=tf, theta_p=tp, theta_b=tb, lam=5.0)
    alpha = RegressionParams(alpha_1=np.zeros(2), alpha_0=np.zeros(2))
    with_reg = objective(params, alpha, matrix, scores).value
    no_reg = objective(
        ReweightParams(theta_f=tf, theta_p=tp, theta_b=tb, lam=0.0), alpha, matrix, scores
    ).value
    assert with_reg == pytest.approx(no_reg, rel=1e-12)


def test_objective_misaligned_scores_error():
    rng = np.random.default_rng(2)
    matrix, scores = _random_instance(rng)
    alpha = RegressionParams(alpha_1=np.zeros(2), alpha_0=np.zeros(2))
    with pytest.raises(ValueError, match="missing"):
        objective(ReweightParams(), alpha, matrix, scores[:-1])


def test_objective_permutation_invariant():
    rng = np.random.default_rng(3)
    matrix, scores = _random_instance(rng)
    params = ReweightParams(theta_f=0.7, theta_p=-0.3, theta_b=0.2)
    alpha = RegressionParams(alpha_1=rng.normal(size=2), alpha_0=rng.normal(size=2))
    base = objective(params, alpha, matrix, scores).value

    sample_perm = rng.permutation(matrix.n_samples)
    model_perm = rng.permutation(matrix.n_models)
    shuffled = EvalMatrix(
        model_ids=tuple(matrix.model_ids[j] for j in model_perm),
        sample_ids=tuple(matrix.sample_ids[i] for i in sample_perm),
        chi=matrix.chi[np.ix_(model_perm, sample_perm)],
        live_metrics=matrix.live_metrics[model_perm],
        metric_names=matrix.metric_names,
    )
    shuffled_scores = [scores[i] for i in rng.permutation(len(scores))]
    assert objective(params, alpha, shuffled, shuffled_scores).value == pytest.approx(
        base, rel=1e-12
    )


def _finite_diff_check(rng, h=1e-5) -> float:
    n_models = int(rng.integers(2, 9))
    n_samples = int(rng.integers(5, 51))
    n_metrics = int(rng.integers(1, 4))
    matrix, scores = _random_instance(rng, n_models, n_samples, n_metrics)
    params = ReweightParams(
        theta_f=float(rng.uniform(-1, 1)),
        theta_p=float(rng.uniform(-1, 1)),
        theta_b=float(rng.uniform(-1, 1)),
        lam=float(rng.uniform(0.0, 0.1)),
    )
    alpha = RegressionParams(alpha_1=rng.normal(size=n_metrics), alpha_0=rng.normal(size=n_metrics))
    ev = objective(params, alpha, matrix, scores)

    def value(theta, a1, a0):
        p = ReweightParams(theta_f=theta[0], theta_p=theta[1], theta_b=theta[2], lam=params.lam)
        return objective(p, RegressionParams(alpha_1=a1, alpha_0=a0), matrix, scores).value

    theta = params.theta
    worst = 0.0
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (value(theta + e, alpha.alpha_1, alpha.alpha_0) - value(theta - e, alpha.alpha_1, alpha.alpha_0)) / (2 * h)
        worst = max(worst, abs(ev.grad_theta[i] - fd) / max(abs(fd), abs(ev.grad_theta[i]), 1.0))
    for i in range(n_metrics):
        e = np.zeros(n_metrics)
        e[i] = h
        fd = (value(theta, alpha.alpha_1 + e, alpha.alpha_0) - value(theta, alpha.alpha_1 - e, alpha.alpha_0)) / (2 * h)
        worst = max(worst, abs(ev.grad_alpha[0][0][i] - fd) / max(abs(fd), abs(ev.grad_alpha[0][0][i]), 1.0))
        fd = (value(theta, alpha.alpha_1, alpha.alpha_0 + e) - value(theta, alpha.alpha_1, alpha.alpha_0 - e)) / (2 * h)
        worst = max(worst, abs(ev.grad_alpha[0][1][i] - fd) / max(abs(fd), abs(ev.grad_alpha[0][1][i]), 1.0))
    return worst


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    worst = max(_finite_diff_check(rng) for _ in range(10))
    assert worst < 1e-5


def test_closed_form_alpha_exact_line():
    s = np.array([1.0, 2.0, 3.0])
    v = np.array([[2.0], [4.0], [6.0]])
    a = _closed_form_alpha(s, v)
    assert a.alpha_1[0] == pytest.approx(2.0, rel=1e-12)
    assert a.alpha_0[0] == pytest.approx(0.0, abs=1e-12)
    assert not a.degenerate


def test_closed_form_alpha_degenerate_flags():
    s = np.array([0.5, 0.5, 0.5])
    v = np.array([[1.0], [2.0], [3.0]])
    a = _closed_form_alpha(s, v)
    assert a.degenerate
    assert a.alpha_1[0] == 0.0
    assert a.alpha_0[0] == pytest.approx(2.0)


def test_refit_regression_only_exact_line():
    # w == 1 via the uniform theta, so s_j is the plain chi row mean
    chi = np.array([[1, 1, 1, 0, 0, 0], [1, 1, 0, 0, 0, 0], [1, 0, 0, 0, 0, 0]], dtype=float)
    s = chi.mean(axis=1)
    v = (3.0 * s + 1.0)[:, None]
    matrix = EvalMatrix(
        model_ids=("m0", "m1", "m2"),
        sample_ids=tuple(f"s{i}" for i in range(6)),
        chi=chi,
        live_metrics=v,
        metric_names=("x",),
    )
    scores = [ScoredSample(f"s{i}", s_p=-1.0, s_f=-1.0) for i in range(6)]
    tf, tp, tb = ReweightParams.uniform_theta()
    alphas, residual = refit_regression_only(
        ReweightParams(theta_f=tf, theta_p=tp, theta_b=tb), matrix, scores
    )
    assert residual == pytest.approx(0.0, abs=1e-18)
    assert alphas[0].alpha_1[0] == pytest.approx(3.0, rel=1e-9)
    assert alphas[0].alpha_0[0] == pytest.approx(1.0, rel=1e-9)


def test_refit_regression_only_planted_truth():
    bench = generate(PlantedSpec(n_samples=200, n_models=8, noise_sigma=1e-4, seed=5))
    _, residual = refit_regression_only(bench.truth.params, bench.matrices, bench.scores)
    assert residual <= bench.truth.noise_total + 1e-12


def test_baseline_residuals_heuristic_equals_uniform_when_all_pass():
    rng = np.random.default_rng(4)
    matrix, _ = _random_instance(rng)
    # all samples pass the heuristic: s_f > s_p and s_f > -5
    scores = [
        ScoredSample(f"s{i}", s_p=-3.0, s_f=-2.0 + 0.001 * i) for i in range(matrix.n_samples)
    ]
    b = baseline_residuals(matrix, scores)
    assert b["heuristic"] == pytest.approx(b["uniform"], rel=1e-9)


def test_baseline_residuals_all_filtered_degenerates_gracefully():
    rng = np.random.default_rng(5)
    matrix, _ = _random_instance(rng)
    scores = [ScoredSample(f"s{i}", s_p=-3.0, s_f=-7.0) for i in range(matrix.n_samples)]
    b = baseline_residuals(matrix, scores)
    v = matrix.live_metrics
    assert b["heuristic"] == pytest.approx(float(((v - v.mean(axis=0)) ** 2).sum()), rel=1e-9)


def test_baseline_residuals_minimum_two_models():
    rng = np.random.default_rng(6)
    matrix, scores = _random_instance(rng, n_models=2)
    b = baseline_residuals(matrix, scores)
    assert np.isfinite(b["uniform"]) and np.isfinite(b["heuristic"])


def test_fit_noiseless_planted_is_realizable():
    bench = generate(PlantedSpec(n_samples=200, n_models=8, noise_sigma=0.0, seed=11))
    f = fit(bench.matrices, bench.scores, opts=FitOptions(seed=11))
    assert f.residual_train < 1e-8
    assert f.containment_ok


def test_fit_noisy_planted_reaches_noise_floor():
    bench = generate(PlantedSpec(n_samples=300, n_models=10, noise_sigma=1e-3, seed=12))
    f = fit(bench.matrices, bench.scores, opts=FitOptions(seed=12))
    assert f.residual_train <= 2.0 * bench.truth.noise_total
    assert f.residual_train <= f.baseline_residuals["uniform"] + 1e-9


def test_fit_single_matrix_and_validation_split():
    bench = generate(
        PlantedSpec(n_samples=200, n_models=10, n_sets=1, noise_sigma=1e-4, seed=13)
    )
    train = bench.matrices[0].without_model(9)
    holdout = bench.matrices[0]
    f = fit(train, bench.scores, opts=FitOptions(seed=13), val_data=holdout)
    assert f.residual_val is not None
    assert len(f.residual_val.per_holdout) == holdout.n_models
    assert f.residual_val.mean >= 0


def test_fit_requires_two_models():
    bench = generate(PlantedSpec(n_samples=50, n_models=2, n_sets=1, seed=14))
    solo = bench.matrices[0].without_model(1)
    with pytest.raises(ValueError):
        fit(solo, bench.scores)


def test_holdout_cv_k3_counting():
    bench = generate(PlantedSpec(n_samples=150, n_models=3, n_sets=1, noise_sigma=0.0, seed=15))
    cv = holdout_cv(bench.matrices[0], bench.scores, opts=FitOptions(seed=15))
    assert len(cv.per_holdout) == 3


def test_holdout_cv_noiseless_floor():
    # enough models that each leave-one-out fit still pins down theta
    bench = generate(PlantedSpec(n_samples=150, n_models=8, n_sets=1, noise_sigma=0.0, seed=15))
    cv = holdout_cv(bench.matrices[0], bench.scores, opts=FitOptions(seed=15))
    assert len(cv.per_holdout) == 8
    assert all(r < 1e-6 for r in cv.per_holdout)


def test_holdout_cv_requires_three_models():
    bench = generate(PlantedSpec(n_samples=50, n_models=2, n_sets=1, seed=16))
    with pytest.raises(ValueError):
        holdout_cv(bench.matrices[0], bench.scores)


def test_holdout_cv_constant_metrics_zero_residual():
    rng = np.random.default_rng(17)
    chi = (rng.random((4, 30)) < 0.5).astype(float)
    matrix = EvalMatrix(
        model_ids=tuple(f"m{j}" for j in range(4)),
        sample_ids=tuple(f"s{i}" for i in range(30)),
        chi=chi,
        live_metrics=np.full((4, 1), 0.7),
        metric_names=("x",),
    )
    scores = [
        ScoredSample(f"s{i}", s_p=float(rng.normal(-3, 1)), s_f=float(rng.normal(-3, 1)))
        for i in range(30)
    ]
    cv = holdout_cv(matrix, scores, opts=FitOptions(seed=17, restarts=2))
    assert cv.mean == pytest.approx(0.0, abs=1e-12)


def test_regularizer_dominance_pulls_mean_weight_to_one():
    bench = generate(PlantedSpec(target_mean_weight=1.6, noise_sigma=1e-3, seed=18))
    assert bench.truth.mean_weight == pytest.approx(1.6, abs=1e-9)
    f = fit(bench.matrices, bench.scores, init=ReweightParams(lam=1e6), opts=FitOptions(seed=18))
    assert abs(f.mean_weight - 1.0) < 1e-2


def test_calibrate_bias_hits_target():
    rng = np.random.default_rng(19)
    s_f = rng.normal(-3, 1, 400)
    s_p = rng.normal(-3.5, 1, 400)
    b = calibrate_bias(5.0, -4.0, s_f, s_p, target=1.3)
    w = weights_array(ReweightParams(theta_f=5.0, theta_p=-4.0, theta_b=b), s_f, s_p)
    assert float(w.mean()) == pytest.approx(1.3, abs=1e-10)


def test_weights_for_mapping():
    params = ReweightParams()
    scores = [ScoredSample("a", -1.0, -1.0), ScoredSample("b", -2.0, -2.0)]
    w = weights_for(params, scores)
    assert set(w) == {"a", "b"}
    assert w["a"] == 1.005
