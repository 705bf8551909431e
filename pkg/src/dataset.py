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

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence, Union

import numpy as np

import core
import log_config

log = log_config.getLogger(__name__)

Seed = Union[int, Sequence[int], np.random.SeedSequence]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclasses.dataclass(frozen=True)
class GroupedDataset:
    """Features, targets and 1-based group labels of n observations.

    Column 0 of `features` may be a constant intercept column (regression
    designs). Logistic models add their own intercept.
    Groups without observations are allowed (n_g = 0) as long as
    `n_groups` covers them.
    """

    features: np.ndarray
    targets: np.ndarray
    groups: np.ndarray
    n_groups: Optional[int] = None

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=float)
        targets = np.array(self.targets, dtype=float)
        groups = np.array(self.groups)

        if features.ndim == 1:
            features = features.reshape(-1, 1)
        if features.ndim != 2:
            raise core.SizeError("features must be a n x d matrix")
        n, d = features.shape
        if n < 1 or d < 1:
            raise core.SizeError(f"dataset needs n >= 1 and d >= 1, got {n=}, {d=}")
        if targets.shape != (n,) or groups.shape != (n,):
            raise core.SizeError(
                f"features, targets and groups must have equal length {n}, "
                f"got {targets.shape} and {groups.shape}"
            )
        if not (np.all(np.isfinite(features)) and np.all(np.isfinite(targets))):
            raise core.DataValueError("dataset contains non-finite entries")
        if groups.dtype.kind not in "iu":
            if groups.dtype.kind != "f" or np.any(groups != np.round(groups)):
                raise core.DataValueError("group labels must be integers")
            groups = groups.astype(np.int64)
        groups = groups.astype(np.int64)
        if np.any(groups < 1):
            raise core.DataValueError("group labels must be in 1..G")
        n_groups = int(groups.max()) if self.n_groups is None else int(self.n_groups)
        if np.any(groups > n_groups):
            raise core.DataValueError(f"group labels must be in 1..{n_groups}")

        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "targets", _frozen(targets))
        object.__setattr__(self, "groups", _frozen(groups))
        object.__setattr__(self, "n_groups", n_groups)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def G(self) -> int:
        assert self.n_groups is not None
        return self.n_groups

    @property
    def group_counts(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.G + 1)[1:]

    def subset(self, indices: np.ndarray) -> GroupedDataset:
        indices = np.asarray(indices)
        return GroupedDataset(
            self.features[indices],
            self.targets[indices],
            self.groups[indices],
            self.n_groups,
        )

    def with_groups(self, groups: np.ndarray, n_groups: int) -> GroupedDataset:
        """Same observations, different group labels (e.g. inferred groups)."""
        return GroupedDataset(self.features, self.targets, groups, n_groups)


def as_array(theta: Union[ParameterVector, np.ndarray, Sequence[float]]) -> np.ndarray:
    if isinstance(theta, ParameterVector):
        return theta.theta
    return np.asarray(theta, dtype=float)


@dataclasses.dataclass(frozen=True)
class ParameterVector:
    """Model coefficients. Index 0 is the intercept."""

    theta: np.ndarray

    def __post_init__(self) -> None:
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(theta)):
            raise core.DataValueError("coefficients must be finite")
        object.__setattr__(self, "theta", _frozen(theta))

    def __len__(self) -> int:
        return len(self.theta)

    @property
    def intercept(self) -> float:
        return float(self.theta[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.theta[1:]


def _stratified_train_indices(
    groups: np.ndarray, n_train: int, perm: np.ndarray
) -> np.ndarray:
    """Per-group quotas by largest remainder, filled in permutation order."""
    labels, counts = np.unique(groups, return_counts=True)
    exact = n_train * counts / len(groups)
    quotas = np.floor(exact).astype(int)
    remainder = n_train - quotas.sum()
    order = np.argsort(-(exact - quotas), kind="stable")
    quotas[order[:remainder]] += 1

    permuted_groups = groups[perm]
    chosen = [
        perm[permuted_groups == label][:quota] for label, quota in zip(labels, quotas)
    ]
    return np.concatenate(chosen)


def split_indices(
    n: int,
    n_train: int,
    seed: Seed,
    groups: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly random partition of range(n), both halves sorted.

    Args:
        n (int)
        n_train (int): Size of the first half, 1 <= n_train < n.
        seed (Seed)
        groups (np.ndarray, optional): Stratify by these labels.
            Defaults to None (unstratified).

    Raises:
        core.SizeError: `n_train` out of range.

    Returns:
        tuple[np.ndarray, np.ndarray]: Training and validation indices.
    """
    if not 1 <= n_train < n:
        raise core.SizeError(f"n_train must be in [1, {n - 1}], got {n_train}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    if groups is None:
        train = perm[:n_train]
    else:
        train = _stratified_train_indices(np.asarray(groups), n_train, perm)
    mask = np.zeros(n, dtype=bool)
    mask[train] = True
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def split_train_val(
    data: GroupedDataset, n_train: int, seed: Seed, stratified: bool = False
) -> tuple[GroupedDataset, GroupedDataset]:
    train_idx, val_idx = split_indices(
        data.n, n_train, seed, data.groups if stratified else None
    )
    return data.subset(train_idx), data.subset(val_idx)


def empirical_marginals(data: GroupedDataset) -> np.ndarray:
    return data.group_counts / data.n
