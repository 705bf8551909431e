import numpy as np
import pytest

import core
import theory
from theory import LinRegDGP


@pytest.fixture
def dgp() -> LinRegDGP:
    return LinRegDGP(a1=1.0, a0=0.0, sigma2=1.0, d=10, p_train=0.9)


def test_bias_squared():
    assert theory.bias_squared(0.5, 0.5, 1.0, 0.0) == pytest.approx(0.25)
    assert theory.bias_squared(0.3, 0.3, 2.0, 0.0) == pytest.approx(0.84)
    assert theory.bias_squared(0.5, 0.9, 1.0, 1.0) == 0.0
    with pytest.raises(core.DomainError):
        theory.bias_squared(1.5, 0.5, 1.0, 0.0)


def test_variance_term():
    assert theory.variance_term(1.0, 0.9, 0.9, 1000, 10) == pytest.approx(0.011)
    assert theory.variance_term(1.0, 0.5, 0.9, 1000, 10) == pytest.approx(
        0.0305556, abs=1e-7
    )
    assert theory.variance_term(1.0, 0.5, 0.9, 2000, 10) == pytest.approx(
        theory.variance_term(1.0, 0.5, 0.9, 1000, 10) / 2
    )
    for p_train in (0.0, 1.0):
        with pytest.raises(core.DomainError):
            theory.variance_term(1.0, 0.5, p_train, 1000, 10)


def test_expected_loss_approx(dgp):
    point = theory.expected_loss_approx(dgp, 0.5, 0.5, 1000)
    assert point.expected_loss == pytest.approx(1.2805556, abs=1e-7)
    assert point.expected_loss == pytest.approx(
        point.bias_sq + point.variance + dgp.sigma2
    )
    limit = theory.expected_loss_approx(dgp, 0.5, 0.5, 10**12)
    assert limit.expected_loss == pytest.approx(1.0, abs=1e-9)


def test_expected_loss_is_quadratic_in_p(dgp):
    h = 0.05
    seconds = []
    for center in (0.2, 0.45, 0.7):
        values = [
            theory.expected_loss_approx(dgp, 0.5, center + k * h, 500).expected_loss
            for k in (-1, 0, 1)
        ]
        seconds.append(values[0] - 2 * values[1] + values[2])
    assert np.ptp(seconds) < 1e-9


def test_optimal_p_closed_form(dgp):
    expected = (0.5 + 0.9 * 11 / 90) / (1 + 11 / 90)
    p_star = theory.optimal_p(dgp, 0.5, 1000)
    assert p_star == pytest.approx(expected, abs=1e-12)
    assert p_star == pytest.approx(0.54356, abs=1e-5)


def test_optimal_p_approaches_test_share(dgp):
    assert theory.optimal_p(dgp, 0.5, 10**9) == pytest.approx(0.5, abs=1e-6)
    assert theory.optimal_p(dgp, 0.5, 10**12) == pytest.approx(0.5, abs=1e-9)


def test_optimal_p_without_bias_is_training_share():
    dgp = LinRegDGP(a1=0.3, a0=0.3, sigma2=1.0, d=10, p_train=0.9)
    assert theory.optimal_p(dgp, 0.5, 1000) == 0.9


@pytest.mark.parametrize("n", [10, 300, 5000])
def test_optimal_p_minimizes_expected_loss(dgp, n):
    p_star = theory.optimal_p(dgp, 0.5, n)
    assert 0.5 < p_star < 0.9
    h = 1e-6

    def loss(p):
        return theory.expected_loss_approx(dgp, 0.5, p, n).expected_loss

    assert abs((loss(p_star + h) - loss(p_star - h)) / (2 * h)) <= 1e-6


def test_invalid_dgp():
    with pytest.raises(core.DomainError):
        LinRegDGP(a1=1.0, a0=0.0, sigma2=1.0, d=10, p_train=1.0)
    with pytest.raises(core.DomainError):
        LinRegDGP(a1=1.0, a0=0.0, sigma2=0.0, d=10, p_train=0.5)
    with pytest.raises(core.SizeError):
        LinRegDGP(a1=1.0, a0=0.0, sigma2=1.0, d=2, p_train=0.5, beta=[1.0])


def test_theory_curve_decreases_toward_test_share():
    dgp = LinRegDGP(a1=1.0, a0=0.0, sigma2=1.0, d=250, p_train=0.9)
    curve = theory.theory_curve(dgp, 0.5, [10**2, 10**4, 10**6])
    values = [p for _, p in curve]
    assert values[0] > values[1] > values[2] > 0.5
    assert [n for n, _ in curve] == [100, 10_000, 1_000_000]
    small = LinRegDGP(a1=1.0, a0=0.0, sigma2=1.0, d=10, p_train=0.9)
    assert theory.optimal_p(dgp, 0.5, 1000) > theory.optimal_p(small, 0.5, 1000)
    with pytest.raises(core.SizeError):
        theory.theory_curve(dgp, 0.5, [])


def test_sample_dgp(dgp):
    data = theory.sample_dgp(dgp, 1000, seed=3)
    np.testing.assert_array_equal(data.group_counts, [900, 100])
    np.testing.assert_array_equal(data.features[:, 0], 1.0)
    assert data.d == dgp.d + 1
    again = theory.sample_dgp(dgp, 1000, seed=3)
    np.testing.assert_array_equal(data.features, again.features)
    np.testing.assert_array_equal(data.targets, again.targets)


def test_sample_dgp_group_means():
    dgp = LinRegDGP(a1=2.0, a0=-1.0, sigma2=1.0, d=0, p_train=0.7)
    data = theory.sample_dgp(dgp, 2000, seed=0)
    for g, a in ((1, 2.0), (2, -1.0)):
        y = data.targets[data.groups == g]
        assert abs(y.mean() - a) < 4 / np.sqrt(len(y))


def test_sample_dgp_empty_group(dgp):
    with pytest.raises(core.SizeError):
        theory.sample_dgp(dgp, 4, seed=0)


def test_conditional_risk_of_true_coefficients():
    dgp = LinRegDGP(a1=0.5, a0=0.5, sigma2=2.0, d=3, p_train=0.5)
    beta = np.concatenate([[0.5], dgp.slopes])
    assert theory.conditional_test_risk(beta, dgp, 0.3) == pytest.approx(2.0)


def test_conditional_risk_of_asymptotic_coefficients(dgp):
    p = 0.7
    beta = np.concatenate([[p * dgp.a1 + (1 - p) * dgp.a0], dgp.slopes])
    expected = theory.bias_squared(0.5, p, dgp.a1, dgp.a0) + dgp.sigma2
    assert theory.conditional_test_risk(beta, dgp, 0.5) == pytest.approx(expected)


def test_conditional_risk_agrees_with_test_sample(dgp):
    beta = np.concatenate([[0.3], dgp.slopes + 0.1])
    exact = theory.conditional_test_risk(beta, dgp, 0.5)
    mean, se = theory.empirical_test_risk(beta, dgp, 0.5, 200_000, seed=1)
    assert abs(mean - exact) < 3 * se


def test_simulate_mse_is_reproducible(dgp):
    kwargs = dict(p_test=0.5, p_grid=[0.5, 0.9], n=200, replications=20, seed=4)
    first = theory.simulate_mse(dgp, workers=1, **kwargs)
    second = theory.simulate_mse(dgp, workers=1, **kwargs)
    parallel = theory.simulate_mse(dgp, workers=2, **kwargs)
    assert [pt.mean_risk for pt in first] == [pt.mean_risk for pt in second]
    assert [pt.mean_risk for pt in first] == [pt.mean_risk for pt in parallel]
    assert all(pt.failures == 0 and pt.replications == 20 for pt in first)


def test_simulate_mse_needs_two_replications(dgp):
    with pytest.raises(core.SizeError):
        theory.simulate_mse(dgp, 0.5, [0.5], 200, replications=1, seed=0)


def test_simulate_mse_at_training_share(dgp):
    (point,) = theory.simulate_mse(dgp, 0.5, [0.9], 5000, 200, seed=8, workers=1)
    expected = theory.expected_loss_approx(dgp, 0.5, 0.9, 5000).expected_loss
    assert abs(point.mean_risk - expected) < 3 * point.standard_error + 2e-4


@pytest.mark.slow
def test_simulated_curve_matches_closed_form(dgp):
    p_grid = np.linspace(0.0, 1.0, 11)
    points = theory.simulate_mse(dgp, 0.5, p_grid, 5000, 1000, seed=0)
    simulated = np.array([pt.mean_risk for pt in points])
    approx = np.array(
        [theory.expected_loss_approx(dgp, 0.5, p, 5000).expected_loss for p in p_grid]
    )
    # The closed form drops the O(d / n) noise of the misspecified intercept.
    np.testing.assert_allclose(simulated, approx, rtol=5e-3)
    step = p_grid[1] - p_grid[0]
    minimizer = p_grid[np.argmin(simulated)]
    assert abs(minimizer - theory.optimal_p(dgp, 0.5, 5000)) <= step
