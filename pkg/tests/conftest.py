import numpy as np
import pytest

import core
from bilevel import BilevelConfig
from dataset import GroupedDataset
from estimators import PenaltySpec, SolverConfig
from synthetic import SyntheticShiftSpec
from weights import ShiftSpec


def make_logistic_data(
    n: int = 200, d: int = 5, n_groups: int = 4, seed: int = 0
) -> GroupedDataset:
    """Noisy logistic data, every group with about n / n_groups rows."""
    rng = np.random.default_rng(seed)
    groups = np.arange(n) % n_groups + 1
    rng.shuffle(groups)
    offsets = np.linspace(-0.5, 0.5, n_groups)[groups - 1]
    features = rng.normal(size=(n, d)) + 0.3 * offsets[:, None]
    beta = rng.normal(scale=0.7, size=d)
    z = 0.2 + features @ beta + offsets
    targets = (rng.random(n) < 1 / (1 + np.exp(-z))).astype(float)
    return GroupedDataset(features, targets, groups, n_groups)


@pytest.fixture
def logistic_data() -> GroupedDataset:
    return make_logistic_data()


@pytest.fixture
def shift4() -> ShiftSpec:
    return ShiftSpec([0.4, 0.3, 0.2, 0.1], [0.25, 0.25, 0.25, 0.25])


@pytest.fixture
def ridge() -> PenaltySpec:
    return PenaltySpec(core.PenaltyKind.RIDGE, 1e-2)


@pytest.fixture
def tight_solver() -> SolverConfig:
    return SolverConfig(max_iterations=200, gradient_tolerance=1e-11)


@pytest.fixture
def fast_config(ridge: PenaltySpec) -> BilevelConfig:
    return BilevelConfig(
        learning_rate=0.5,
        momentum=0.5,
        max_steps=5,
        penalty=ridge,
        solver=SolverConfig(max_iterations=100, gradient_tolerance=1e-9),
        seed=3,
    )


@pytest.fixture
def small_spurious() -> SyntheticShiftSpec:
    return SyntheticShiftSpec(n=800, d=4, minority_fraction=0.05, seed=11)
