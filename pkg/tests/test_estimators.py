import itertools

import numpy as np
import pytest
import scipy.optimize

import core
from conftest import make_logistic_data
from dataset import GroupedDataset
from estimators import (
    PenaltySpec,
    SolverConfig,
    accuracy_by_group,
    dfr_ensemble_fit,
    dfr_ensemble_members,
    logistic_fit,
    logistic_gradient,
    logistic_pointwise_loss,
    predict,
    subg_expected_loss,
    subg_fit,
    subg_observation_weights,
    subg_sample_size,
    weighted_logistic_loss,
    wls_fit,
)
from weights import SubsampleFractions


def test_wls_uniform_weights_is_ols():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(40), rng.normal(size=(40, 3))])
    y = X @ [1.0, 2.0, -1.0, 0.5] + rng.normal(size=40)
    data = GroupedDataset(X, y, np.ones(40, dtype=int))
    expected = np.linalg.lstsq(X, y, rcond=None)[0]
    np.testing.assert_allclose(wls_fit(data, np.ones(40)).theta, expected, rtol=1e-10)


def test_wls_scale_invariant_in_weights():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(30), rng.normal(size=(30, 2))])
    y = rng.normal(size=30)
    data = GroupedDataset(X, y, np.ones(30, dtype=int))
    w = rng.uniform(0.5, 2.0, size=30)
    np.testing.assert_allclose(
        wls_fit(data, w).theta, wls_fit(data, 7.0 * w).theta, rtol=1e-10
    )


def test_wls_singular_design():
    X = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    data = GroupedDataset(X, np.zeros(10), np.ones(10, dtype=int))
    with pytest.raises(core.SingularDesign):
        wls_fit(data, np.ones(10))


def test_wls_zero_weights():
    data = GroupedDataset(np.ones((3, 1)), np.zeros(3), [1, 1, 1])
    with pytest.raises(core.DegenerateWeights):
        wls_fit(data, np.zeros(3))


def test_logistic_fit_matches_reference_optimizer(logistic_data, ridge):
    w = np.random.default_rng(2).uniform(0.2, 3.0, size=logistic_data.n)
    solver = SolverConfig(gradient_tolerance=1e-10)
    fit = logistic_fit(logistic_data, w, ridge, solver)
    assert fit.converged
    reference = scipy.optimize.minimize(
        lambda t: weighted_logistic_loss(t, logistic_data, w, ridge),
        np.zeros(logistic_data.d + 1),
        jac=lambda t: logistic_gradient(t, logistic_data, w, ridge),
        method="BFGS",
        options={"gtol": 1e-10},
    )
    np.testing.assert_allclose(fit.theta.theta, reference.x, atol=1e-6)


def test_logistic_fit_gradient_vanishes(logistic_data, ridge):
    fit = logistic_fit(logistic_data, np.ones(logistic_data.n), ridge)
    g = logistic_gradient(fit.theta, logistic_data, np.ones(logistic_data.n), ridge)
    assert np.linalg.norm(g) <= SolverConfig().gradient_tolerance
    assert fit.gradient_norm == pytest.approx(np.linalg.norm(g))


def test_logistic_fit_warm_start_converges_immediately(logistic_data, ridge):
    w = np.ones(logistic_data.n)
    fit = logistic_fit(logistic_data, w, ridge)
    again = logistic_fit(logistic_data, w, ridge, initial=fit.theta)
    assert again.iterations == 0
    np.testing.assert_array_equal(again.theta.theta, fit.theta.theta)


def test_unpenalized_fit_invariant_to_weight_scale(logistic_data):
    w = np.ones(logistic_data.n)
    none = PenaltySpec.none()
    a = logistic_fit(logistic_data, w, none).theta.theta
    b = logistic_fit(logistic_data, 3.0 * w, none).theta.theta
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_single_class_is_degenerate(ridge):
    data = GroupedDataset(np.eye(3), np.zeros(3), [1, 2, 3])
    with pytest.raises(core.DegenerateWeights):
        logistic_fit(data, np.ones(3), ridge)


def test_class_without_weight_is_degenerate(ridge):
    data = GroupedDataset(np.eye(3), np.array([0.0, 1.0, 0.0]), [1, 2, 3])
    with pytest.raises(core.DegenerateWeights):
        logistic_fit(data, np.array([1.0, 0.0, 1.0]), ridge)


def test_strict_fit_raises_when_not_converged(logistic_data, ridge):
    solver = SolverConfig(max_iterations=1, gradient_tolerance=1e-14)
    w = np.ones(logistic_data.n)
    with pytest.raises(core.NotConverged):
        logistic_fit(logistic_data, w, ridge, solver, strict=True)
    fit = logistic_fit(logistic_data, w, ridge, solver)
    assert not fit.converged


def test_l1_fit_shrinks_slopes_to_zero(logistic_data):
    strong = PenaltySpec(core.PenaltyKind.L1, 10.0)
    fit = logistic_fit(logistic_data, np.ones(logistic_data.n), strong)
    np.testing.assert_allclose(fit.theta.slopes, 0.0, atol=1e-6)


def test_l1_has_no_gradient():
    penalty = PenaltySpec(core.PenaltyKind.L1, 1.0)
    assert not penalty.differentiable
    with pytest.raises(core.NotDifferentiable):
        penalty.gradient(np.ones(3))
    with pytest.raises(core.NotDifferentiable):
        penalty.hessian_diagonal(np.ones(3))


@pytest.mark.parametrize("kind", [core.PenaltyKind.RIDGE, core.PenaltyKind.SMOOTHED_L1])
def test_penalty_derivatives_match_finite_differences(kind):
    penalty = PenaltySpec(kind, 0.3, epsilon=0.1)
    theta = np.array([5.0, -0.4, 0.2, 1.3])
    h = 1e-6
    eye = np.eye(len(theta))
    numeric = [
        (penalty.value(theta + h * e) - penalty.value(theta - h * e)) / (2 * h)
        for e in eye
    ]
    np.testing.assert_allclose(penalty.gradient(theta), numeric, atol=1e-8)
    numeric_diag = [
        (penalty.gradient(theta + h * e)[j] - penalty.gradient(theta - h * e)[j])
        / (2 * h)
        for j, e in enumerate(eye)
    ]
    np.testing.assert_allclose(penalty.hessian_diagonal(theta), numeric_diag, atol=1e-6)
    assert penalty.gradient(theta)[0] == 0.0


def test_invalid_penalty():
    with pytest.raises(core.DomainError):
        PenaltySpec(core.PenaltyKind.RIDGE, -1.0)
    with pytest.raises(core.DomainError):
        PenaltySpec(core.PenaltyKind.SMOOTHED_L1, 1.0, epsilon=0.0)


def test_accuracy_by_group_marks_empty_groups():
    data = GroupedDataset(
        np.array([[1.0], [-1.0], [2.0]]), np.array([1.0, 1.0, 0.0]), [1, 1, 3], 3
    )
    theta = np.array([0.0, 1.0])
    np.testing.assert_array_equal(predict(theta, data), [1, 0, 1])
    acc = accuracy_by_group(theta, data)
    assert acc[0] == 0.5 and np.isnan(acc[1]) and acc[2] == 0.0


def test_subg_sample_size():
    data = GroupedDataset(np.zeros((9, 1)), np.zeros(9), [1] * 6 + [2] * 3)
    assert subg_sample_size(data, SubsampleFractions([0.5, 1.0])) == 6
    assert subg_sample_size(data, SubsampleFractions([0.4, 1.0])) == 6
    assert subg_sample_size(data, SubsampleFractions([1.0, 1.0])) == 9


def _enumerated_subsample_loss(theta, data, v):
    """Average subsample loss over every subsample of ceil(v_g n_g) per group."""
    loss = logistic_pointwise_loss(theta, data)
    rows = [np.flatnonzero(data.groups == g) for g in range(1, data.G + 1)]
    sizes = [int(np.ceil(v_g * len(r) - 1e-9)) for v_g, r in zip(v.v, rows)]
    per_group = [list(itertools.combinations(r, k)) for r, k in zip(rows, sizes)]
    totals = [
        sum(loss[list(idx)].sum() for idx in chosen) / sum(sizes)
        for chosen in itertools.product(*per_group)
    ]
    return float(np.mean(totals))


@pytest.mark.parametrize(
    "counts, v",
    [
        ([6, 4], [0.5, 1.0]),
        ([5, 3, 4], [0.6, 1.0, 0.75]),
        ([2, 6], [1.0, 1 / 3]),
    ],
)
def test_subg_relaxation_equals_enumeration(counts, v):
    rng = np.random.default_rng(sum(counts))
    n = sum(counts)
    groups = np.repeat(np.arange(1, len(counts) + 1), counts)
    data = GroupedDataset(
        rng.normal(size=(n, 2)), rng.integers(0, 2, n).astype(float), groups
    )
    theta = np.array([0.1, -0.7, 0.4])
    fractions = SubsampleFractions(v)
    expected = _enumerated_subsample_loss(theta, data, fractions)
    assert subg_expected_loss(theta, data, fractions) == pytest.approx(
        expected, abs=1e-12
    )
    w = subg_observation_weights(data, fractions)
    assert weighted_logistic_loss(
        theta, data, w, PenaltySpec.none()
    ) == pytest.approx(expected, abs=1e-12)


def test_subg_fit_with_all_fractions_one_is_unweighted_fit(logistic_data, ridge):
    v = SubsampleFractions(np.ones(logistic_data.G))
    a = subg_fit(logistic_data, v, ridge).theta.theta
    b = logistic_fit(logistic_data, np.ones(logistic_data.n), ridge).theta.theta
    np.testing.assert_allclose(a, b)


def test_dfr_members_are_group_subsamples(logistic_data):
    v = SubsampleFractions([1.0, 0.5, 0.25, 0.8])
    members = dfr_ensemble_members(logistic_data, v, 4, seed=5)
    again = dfr_ensemble_members(logistic_data, v, 4, seed=5)
    expected = np.ceil(v.v * logistic_data.group_counts - 1e-9)
    for rows, rows_again in zip(members, again):
        np.testing.assert_array_equal(rows, rows_again)
        counts = np.bincount(logistic_data.groups[rows] - 1, minlength=4)
        np.testing.assert_array_equal(counts, expected)
        assert len(np.unique(rows)) == len(rows)
    assert not np.array_equal(members[0], members[1])


def test_dfr_ensemble_averages_members(ridge):
    data = make_logistic_data(n=120, seed=4)
    v = SubsampleFractions([1.0, 0.6, 0.6, 0.6])
    ensemble = dfr_ensemble_fit(data, v, 3, ridge, seed=1)
    mean = np.mean([fit.theta.theta for fit in ensemble.members], axis=0)
    np.testing.assert_allclose(ensemble.theta.theta, mean)
    assert len(ensemble.member_indices) == 3
    for fit, rows in zip(ensemble.members, ensemble.member_indices):
        subsample = data.subset(rows)
        gradient = logistic_gradient(fit.theta, subsample, np.ones(len(rows)), ridge)
        assert np.linalg.norm(gradient) < 1e-6
