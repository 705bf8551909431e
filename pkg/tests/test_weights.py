import numpy as np
import pytest

import core
from weights import (
    LossWeights,
    ShiftSpec,
    SimplexWeights,
    SubsampleFractions,
    likelihood_ratios,
    normalize_simplex,
    per_observation_weights,
)


def test_likelihood_ratios():
    shift = ShiftSpec([0.8, 0.2], [0.5, 0.5])
    np.testing.assert_allclose(likelihood_ratios(shift).r, [0.625, 2.5])


def test_likelihood_ratios_zero_where_both_marginals_vanish():
    shift = ShiftSpec([0.5, 0.5, 0.0], [0.2, 0.8, 0.0])
    np.testing.assert_allclose(likelihood_ratios(shift).r, [0.4, 1.6, 0.0])


def test_no_shift_gives_unit_ratios():
    shift = ShiftSpec([0.1, 0.2, 0.7], [0.1, 0.2, 0.7])
    np.testing.assert_allclose(likelihood_ratios(shift).r, 1.0)


def test_support_violation_on_construction():
    with pytest.raises(core.SupportViolation):
        ShiftSpec([1.0, 0.0], [0.5, 0.5])


@pytest.mark.parametrize(
    "p_train, p_test",
    [
        ([0.5, 0.4], [0.5, 0.5]),
        ([1.2, -0.2], [0.5, 0.5]),
        ([0.5, 0.5], [0.2, 0.3, 0.5]),
        ([np.nan, 1.0], [0.5, 0.5]),
    ],
)
def test_invalid_shift(p_train, p_test):
    with pytest.raises(core.DomainError):
        ShiftSpec(p_train, p_test)


def test_shift_errors_are_value_errors():
    with pytest.raises(ValueError):
        ShiftSpec([0.5, 0.4], [0.5, 0.5])


def test_normalize_simplex():
    np.testing.assert_allclose(normalize_simplex([1.0, 3.0]).p, [0.25, 0.75])
    with pytest.raises(core.DegenerateWeights):
        normalize_simplex([0.0, 0.0])
    with pytest.raises(core.DegenerateWeights):
        normalize_simplex([1.0, -1.0])


def test_simplex_weights_reject_sum_off_by_more_than_tolerance():
    SimplexWeights([0.5, 0.5 + 1e-12])
    with pytest.raises(core.DegenerateWeights):
        SimplexWeights([0.5, 0.6])


def test_per_observation_weights_at_test_marginals_are_ratios():
    shift = ShiftSpec([0.8, 0.2], [0.5, 0.5])
    groups = np.array([1, 2, 2, 1])
    w = per_observation_weights(SimplexWeights(shift.p_test), shift, groups)
    np.testing.assert_allclose(w, [0.625, 2.5, 2.5, 0.625])


def test_per_observation_weights_at_training_marginals_are_one():
    shift = ShiftSpec([0.8, 0.2], [0.5, 0.5])
    w = per_observation_weights(SimplexWeights(shift.p_train), shift, [1, 2, 1])
    np.testing.assert_allclose(w, 1.0)


def test_per_observation_weights_size_mismatch():
    shift = ShiftSpec([0.8, 0.2], [0.5, 0.5])
    with pytest.raises(core.SizeError):
        per_observation_weights(SimplexWeights([0.2, 0.3, 0.5]), shift, [1, 2])


def test_balancing_fractions():
    v = SubsampleFractions.balancing(np.array([10, 5, 20]))
    np.testing.assert_allclose(v.v, [0.5, 1.0, 0.25])
    with pytest.raises(core.EmptyGroup):
        SubsampleFractions.balancing(np.array([10, 0]))


@pytest.mark.parametrize("v", [[0.5, 0.5], [1.0, 1.1], [1.0, -0.1]])
def test_invalid_fractions(v):
    with pytest.raises(core.DegenerateWeights):
        SubsampleFractions(v)


def test_uniform_loss_weights():
    np.testing.assert_allclose(LossWeights.uniform(4).q, 0.25)
