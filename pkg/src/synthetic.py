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

"""Spurious correlation benchmark.

Four groups, one per (label y, attribute a) cell:

    group 1: y = 0, a = 0    majority
    group 2: y = 0, a = 1    minority
    group 3: y = 1, a = 0    minority
    group 4: y = 1, a = 1    majority

The features are a core block whose mean depends on y, a spurious block
whose mean depends on a, and isotropic noise.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

import core
import log_config
from dataset import GroupedDataset, Seed
from weights import ShiftSpec

log = log_config.getLogger(__name__)

N_GROUPS = 4


@dataclasses.dataclass(frozen=True)
class SyntheticShiftSpec:
    n: int = 5000
    d: int = 10
    # P(y = 1) in training.
    class_balance: float = 0.5
    spurious_strength: float = 2.0
    core_strength: float = 1.0
    # Training probability of each minority cell.
    minority_fraction: float = 0.012
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < N_GROUPS:
            raise core.SizeError(f"n must be >= {N_GROUPS}, got {self.n}")
        if self.d < 2:
            raise core.SizeError(f"d must be >= 2 (core and spurious), got {self.d}")
        if not 0 < self.class_balance < 1:
            raise core.DomainError("class_balance must be in (0, 1)")
        if not 0 < self.minority_fraction < 0.5:
            raise core.DomainError("minority_fraction must be in (0, 0.5)")
        if self.minority_fraction >= min(self.class_balance, 1 - self.class_balance):
            raise core.DomainError(
                "minority_fraction must be smaller than both class probabilities"
            )
        if not self.noise_sd >= 0:
            raise core.DomainError("noise_sd must be >= 0")

    @property
    def core_dim(self) -> int:
        return max(1, self.d // 2)

    @property
    def spurious_dim(self) -> int:
        return self.d - self.core_dim

    def cell_probabilities(self) -> np.ndarray:
        c, mf = self.class_balance, self.minority_fraction
        return np.array([1 - c - mf, mf, mf, c - mf])


def cell_labels(groups: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(y, a) of each group index."""
    y, a = np.divmod(np.asarray(groups) - 1, 2)
    return y, a


def _features(
    spec: SyntheticShiftSpec, groups: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    y, a = cell_labels(groups)
    n = len(groups)
    core_mean = spec.core_strength * (2 * y - 1) / math.sqrt(spec.core_dim)
    spurious_mean = spec.spurious_strength * (2 * a - 1) / math.sqrt(spec.spurious_dim)
    means = np.hstack(
        [
            np.repeat(core_mean[:, None], spec.core_dim, axis=1),
            np.repeat(spurious_mean[:, None], spec.spurious_dim, axis=1),
        ]
    )
    features = means + spec.noise_sd * rng.standard_normal((n, spec.d))
    return features, y.astype(float)


def _dataset(
    spec: SyntheticShiftSpec, counts: np.ndarray, rng: np.random.Generator
) -> GroupedDataset:
    groups = np.repeat(np.arange(1, N_GROUPS + 1), counts)
    groups = groups[rng.permutation(len(groups))]
    features, targets = _features(spec, groups, rng)
    return GroupedDataset(features, targets, groups, N_GROUPS)


def generate_spurious(
    spec: SyntheticShiftSpec, seed: Optional[Seed] = None
) -> tuple[GroupedDataset, ShiftSpec]:
    """Draw a training set and the shift towards equally weighted groups.

    Group counts are multinomial with the cell probabilities of `spec`.
    `seed` overrides `spec.seed`.

    Raises:
        core.SizeError: A cell was drawn empty.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    probabilities = spec.cell_probabilities()
    counts = rng.multinomial(spec.n, probabilities)
    if np.any(counts == 0):
        raise core.SizeError(
            f"groups {(np.flatnonzero(counts == 0) + 1).tolist()} are empty, "
            "increase n or minority_fraction"
        )
    data = _dataset(spec, counts, rng)
    log.debug(f"generated group counts {counts.tolist()}")
    shift = ShiftSpec(probabilities, np.full(N_GROUPS, 1.0 / N_GROUPS))
    return data, shift


def generate_balanced_test(
    spec: SyntheticShiftSpec, n: int, seed: Seed
) -> GroupedDataset:
    """Test set with n // 4 observations in every group."""
    if n < N_GROUPS:
        raise core.SizeError(f"n must be >= {N_GROUPS}, got {n}")
    rng = np.random.default_rng(seed)
    return _dataset(spec, np.full(N_GROUPS, n // N_GROUPS), rng)
