# GroupWeightOpt
# Copyright (C) 2024  GroupWeightOpt contributors

# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU Affero General Public License as
# published by the Free Software Foundation, either version 3 of the
# License, or (at your option) any later version.

# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Affero General Public License for more details.

# You should have received a copy of the GNU Affero General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

"""Weight algebra: marginals, likelihood ratios and the weight vectors
p (group weights), v (subsample fractions) and q (loss weights)."""

from __future__ import annotations

import dataclasses
from typing import Sequence, Union

import numpy as np

import config
import core

ArrayLike = Union[np.ndarray, Sequence[float]]


def _probability_vector(
    values: ArrayLike, name: str, tolerance: float, error: type[core.ValidationError]
) -> np.ndarray:
    p = np.array(values, dtype=float).reshape(-1)
    if p.size == 0:
        raise error(f"{name} must not be empty")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise error(f"{name} must be finite and nonnegative, got {p}")
    if abs(p.sum() - 1.0) > tolerance:
        raise error(f"{name} must sum to 1, got {p.sum()!r}")
    p.setflags(write=False)
    return p


@dataclasses.dataclass(frozen=True)
class ShiftSpec:
    """Marginal group probabilities under training and test distribution."""

    p_train: np.ndarray
    p_test: np.ndarray

    def __post_init__(self) -> None:
        p_train = _probability_vector(
            self.p_train, "p_train", config.CONSTRUCTION_TOLERANCE, core.DomainError
        )
        p_test = _probability_vector(
            self.p_test, "p_test", config.CONSTRUCTION_TOLERANCE, core.DomainError
        )
        if p_train.shape != p_test.shape:
            raise core.DomainError(
                f"p_train and p_test need the same number of groups, "
                f"got {len(p_train)} and {len(p_test)}"
            )
        _check_support(p_train, p_test)
        object.__setattr__(self, "p_train", p_train)
        object.__setattr__(self, "p_test", p_test)

    @property
    def n_groups(self) -> int:
        return len(self.p_train)

    def swapped(self) -> ShiftSpec:
        return ShiftSpec(self.p_test, self.p_train)


def _check_support(p_train: np.ndarray, p_test: np.ndarray) -> None:
    missing = np.flatnonzero((p_train == 0) & (p_test > 0))
    if missing.size:
        raise core.SupportViolation(
            f"groups {(missing + 1).tolist()} have test mass but no training mass"
        )


@dataclasses.dataclass(frozen=True)
class LikelihoodRatios:
    r: np.ndarray

    def __post_init__(self) -> None:
        r = np.array(self.r, dtype=float).reshape(-1)
        assert np.all(np.isfinite(r)) and np.all(r >= 0), f"invalid ratios {r}"
        r.setflags(write=False)
        object.__setattr__(self, "r", r)


@dataclasses.dataclass(frozen=True)
class SimplexWeights:
    p: np.ndarray

    def __post_init__(self) -> None:
        p = _probability_vector(
            self.p, "group weights", config.ARITHMETIC_TOLERANCE, core.DegenerateWeights
        )
        object.__setattr__(self, "p", p)

    def __len__(self) -> int:
        return len(self.p)


@dataclasses.dataclass(frozen=True)
class LossWeights:
    q: np.ndarray

    def __post_init__(self) -> None:
        q = _probability_vector(
            self.q, "loss weights", config.ARITHMETIC_TOLERANCE, core.DegenerateWeights
        )
        object.__setattr__(self, "q", q)

    @classmethod
    def uniform(cls, n_groups: int) -> LossWeights:
        return cls(np.full(n_groups, 1.0 / n_groups))


@dataclasses.dataclass(frozen=True)
class SubsampleFractions:
    """Per-group subsample fractions in [0, 1], the largest one equal to 1."""

    v: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.v, dtype=float).reshape(-1)
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise core.DegenerateWeights(f"invalid subsample fractions {v}")
        if np.any(v < 0) or np.any(v > 1):
            raise core.DegenerateWeights(f"subsample fractions must be in [0, 1]: {v}")
        if abs(v.max() - 1.0) > config.CONSTRUCTION_TOLERANCE:
            raise core.DegenerateWeights(
                f"at least one subsample fraction must be 1, got {v}"
            )
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    def __len__(self) -> int:
        return len(self.v)

    @classmethod
    def balancing(cls, group_counts: np.ndarray) -> SubsampleFractions:
        """v_g = min_h n_h / n_g, subsamples every group to the smallest one."""
        counts = np.asarray(group_counts, dtype=float)
        if np.any(counts <= 0):
            raise core.EmptyGroup(f"balancing needs every group, counts {counts}")
        return cls(counts.min() / counts)


def likelihood_ratios(shift: ShiftSpec) -> LikelihoodRatios:
    """r_g = p_te(g) / p_tr(g), zero where both probabilities are zero.

    Raises:
        core.SupportViolation: A group with test mass has no training mass.
    """
    _check_support(shift.p_train, shift.p_test)
    r = np.zeros_like(shift.p_train)
    present = shift.p_train > 0
    r[present] = shift.p_test[present] / shift.p_train[present]
    return LikelihoodRatios(r)


def normalize_simplex(raw: ArrayLike) -> SimplexWeights:
    """Scale a nonnegative vector onto the probability simplex.

    Raises:
        core.DegenerateWeights: All entries zero, or any entry negative or
            non-finite.
    """
    x = np.array(raw, dtype=float).reshape(-1)
    if x.size == 0 or not np.all(np.isfinite(x)) or np.any(x < 0):
        raise core.DegenerateWeights(f"cannot normalize {x}")
    total = x.sum()
    if total <= 0:
        raise core.DegenerateWeights("cannot normalize the zero vector")
    return SimplexWeights(x / total)


def per_observation_weights(
    p: SimplexWeights, shift: ShiftSpec, groups: np.ndarray
) -> np.ndarray:
    """w_i = p_{g_i} / p_tr(g_i).

    Raises:
        core.SupportViolation: A group present in `groups` has no training
            mass.
    """
    groups = np.asarray(groups)
    if len(p) != shift.n_groups:
        raise core.SizeError(
            f"{len(p)} group weights for {shift.n_groups} groups in the shift"
        )
    present = np.unique(groups)
    if np.any(shift.p_train[present - 1] == 0):
        bad = present[shift.p_train[present - 1] == 0]
        raise core.SupportViolation(f"groups {bad.tolist()} have no training mass")
    ratio = np.zeros(shift.n_groups)
    positive = shift.p_train > 0
    ratio[positive] = p.p[positive] / shift.p_train[positive]
    return ratio[groups - 1]
