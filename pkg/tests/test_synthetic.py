import numpy as np
import pytest

import core
from synthetic import (
    SyntheticShiftSpec,
    cell_labels,
    generate_balanced_test,
    generate_spurious,
)


def test_cell_layout():
    y, a = cell_labels(np.array([1, 2, 3, 4]))
    np.testing.assert_array_equal(y, [0, 0, 1, 1])
    np.testing.assert_array_equal(a, [0, 1, 0, 1])


def test_cell_probabilities():
    spec = SyntheticShiftSpec(class_balance=0.6, minority_fraction=0.05)
    np.testing.assert_allclose(spec.cell_probabilities(), [0.35, 0.05, 0.05, 0.55])
    assert spec.core_dim == 5 and spec.spurious_dim == 5


def test_generate_spurious(small_spurious):
    data, shift = generate_spurious(small_spurious)
    assert (data.n, data.d, data.G) == (800, 4, 4)
    y, _ = cell_labels(data.groups)
    np.testing.assert_array_equal(data.targets, y)
    counts = data.group_counts
    assert counts[0] > counts[1] and counts[3] > counts[2]
    np.testing.assert_allclose(shift.p_train, small_spurious.cell_probabilities())
    np.testing.assert_allclose(shift.p_test, 0.25)


def test_spurious_block_follows_attribute(small_spurious):
    data, _ = generate_spurious(small_spurious)
    _, a = cell_labels(data.groups)
    spurious = data.features[:, small_spurious.core_dim :].mean(axis=1)
    assert spurious[a == 1].mean() > 0 > spurious[a == 0].mean()


def test_generation_is_seeded(small_spurious):
    first, _ = generate_spurious(small_spurious)
    second, _ = generate_spurious(small_spurious)
    other, _ = generate_spurious(small_spurious, seed=[11, 1])
    np.testing.assert_array_equal(first.features, second.features)
    np.testing.assert_array_equal(first.groups, second.groups)
    assert not np.array_equal(first.features, other.features)


def test_empty_cell_is_reported():
    spec = SyntheticShiftSpec(n=20, minority_fraction=1e-6)
    with pytest.raises(core.SizeError):
        generate_spurious(spec)


def test_balanced_test_set(small_spurious):
    test = generate_balanced_test(small_spurious, 1002, seed=5)
    np.testing.assert_array_equal(test.group_counts, [250, 250, 250, 250])


@pytest.mark.parametrize(
    "kwargs, error",
    [
        ({"n": 3}, core.SizeError),
        ({"d": 1}, core.SizeError),
        ({"class_balance": 1.0}, core.DomainError),
        ({"minority_fraction": 0.0}, core.DomainError),
        ({"class_balance": 0.1, "minority_fraction": 0.2}, core.DomainError),
    ],
)
def test_invalid_generator_settings(kwargs, error):
    with pytest.raises(error):
        SyntheticShiftSpec(**kwargs)
