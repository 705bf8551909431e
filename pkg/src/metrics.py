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
import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

import core
import log_config
from dataset import GroupedDataset
from estimators import Theta, accuracy_by_group
from theory import ConditionalSampler
from weights import LikelihoodRatios, ShiftSpec, likelihood_ratios

log = log_config.getLogger(__name__)

PointwiseLoss = Callable[[Theta, np.ndarray, np.ndarray], np.ndarray]

CONFIDENCE_LEVEL = 0.9
SIGNIFICANCE_LEVELS = ((0.05, "**"), (0.1, "*"))


def _defined(per_group: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(per_group, dtype=float).reshape(-1)
    defined = ~np.isnan(values)
    if not np.any(defined):
        raise core.AllGroupsEmpty("no group has test observations")
    if np.any((values[defined] < 0) | (values[defined] > 1)):
        raise core.DomainError(f"accuracies must be in [0, 1]: {values}")
    return values, defined


def weighted_average_accuracy(
    per_group: Sequence[float], group_weights: Optional[Sequence[float]] = None
) -> float:
    """sum_g w_g acc_g over the groups with a defined accuracy.

    Undefined (nan) entries are dropped and the remaining weights
    renormalized. Weights default to uniform.
    """
    values, defined = _defined(per_group)
    if group_weights is None:
        w = np.ones(len(values))
    else:
        w = np.asarray(group_weights, dtype=float).reshape(-1)
        if w.shape != values.shape:
            raise core.SizeError(f"{len(w)} weights for {len(values)} groups")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise core.DomainError(f"group weights must be nonnegative: {w}")
    w = w[defined]
    if w.sum() <= 0:
        raise core.AllGroupsEmpty("all defined groups have zero weight")
    return float(w @ values[defined] / w.sum())


def worst_group_accuracy(per_group: Sequence[float]) -> float:
    values, defined = _defined(per_group)
    return float(values[defined].min())


@dataclasses.dataclass(frozen=True)
class MetricPair:
    weighted_average_accuracy: float
    worst_group_accuracy: float
    per_group: np.ndarray

    @classmethod
    def from_per_group(
        cls, per_group: Sequence[float], group_weights: Optional[Sequence[float]] = None
    ) -> MetricPair:
        values = np.asarray(per_group, dtype=float)
        return cls(
            weighted_average_accuracy(values, group_weights),
            worst_group_accuracy(values),
            values,
        )


def metric_pair(
    theta: Theta,
    test: GroupedDataset,
    group_weights: Optional[Sequence[float]] = None,
) -> MetricPair:
    """Accuracy per group of the test set and the two summaries."""
    return MetricPair.from_per_group(accuracy_by_group(theta, test), group_weights)


@dataclasses.dataclass(frozen=True)
class PairedTestResult:
    """One-sided paired t-test of treatment > baseline.

    `confidence_interval` is the two-sided 90% interval of the mean
    difference. `p_value` is nan if all differences are zero.
    """

    mean_difference: float
    standard_error: float
    t_statistic: float
    p_value: float
    n_pairs: int
    confidence_interval: tuple[float, float]
    zero_variance: bool = False

    @property
    def marker(self) -> str:
        return significance_marker(self.p_value)


def significance_marker(p_value: float) -> str:
    """"**" below 5%, "*" below 10%, "" otherwise."""
    if math.isnan(p_value):
        return ""
    for level, marker in SIGNIFICANCE_LEVELS:
        if p_value < level:
            return marker
    return ""


def paired_one_sided_t_test(
    baseline: Sequence[float], treatment: Sequence[float]
) -> PairedTestResult:
    """Paired t-test with alternative mean(treatment - baseline) > 0.

    Raises:
        core.SizeError: Arms of different length or fewer than two pairs.
    """
    a = np.asarray(baseline, dtype=float).reshape(-1)
    b = np.asarray(treatment, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise core.SizeError(f"arms have {len(a)} and {len(b)} entries")
    k = len(a)
    if k < 2:
        raise core.SizeError(f"the paired test needs at least 2 pairs, got {k}")
    d = b - a
    mean = float(d.mean())
    sd = float(d.std(ddof=1))

    if sd <= np.finfo(float).eps * max(1.0, abs(mean)):
        if mean > 0:
            p_value, t = 0.0, math.inf
        elif mean < 0:
            p_value, t = 1.0, -math.inf
        else:
            p_value, t = math.nan, math.nan
        log.warning(f"All {k} paired differences are equal ({mean:g}).")
        return PairedTestResult(
            mean, 0.0, t, p_value, k, (mean, mean), zero_variance=True
        )

    se = sd / math.sqrt(k)
    t = mean / se
    p_value = float(stats.t.sf(t, df=k - 1))
    half_width = float(stats.t.ppf(0.5 + CONFIDENCE_LEVEL / 2, df=k - 1)) * se
    return PairedTestResult(
        mean, se, t, p_value, k, (mean - half_width, mean + half_width)
    )


@dataclasses.dataclass(frozen=True)
class IdentityCheck:
    weighted_train_estimate: float
    test_estimate: float
    pooled_standard_error: float

    @property
    def difference(self) -> float:
        return self.weighted_train_estimate - self.test_estimate

    @property
    def z_score(self) -> float:
        if self.pooled_standard_error == 0:
            return 0.0 if self.difference == 0 else math.inf
        return abs(self.difference) / self.pooled_standard_error


def _monte_carlo_mean(
    theta: Theta,
    marginals: np.ndarray,
    group_factor: np.ndarray,
    sampler: ConditionalSampler,
    loss: PointwiseLoss,
    sample_size: int,
    seed: np.random.SeedSequence,
    chunk_size: int,
) -> tuple[float, float]:
    total = 0.0
    total_sq = 0.0
    chunks = math.ceil(sample_size / chunk_size)
    for i, child in enumerate(seed.spawn(chunks)):
        size = min(chunk_size, sample_size - i * chunk_size)
        rng = np.random.default_rng(child)
        groups = rng.choice(len(marginals), size=size, p=marginals) + 1
        values = np.empty(size)
        for g in np.unique(groups):
            rows = np.flatnonzero(groups == g)
            features, targets = sampler(int(g), len(rows), rng)
            values[rows] = group_factor[g - 1] * loss(theta, features, targets)
        total += float(values.sum())
        total_sq += float(values @ values)
    mean = total / sample_size
    variance = max(total_sq / sample_size - mean**2, 0.0)
    variance *= sample_size / (sample_size - 1)
    return mean, math.sqrt(variance / sample_size)


def importance_identity_check(
    theta: Theta,
    shift: ShiftSpec,
    sampler: ConditionalSampler,
    sample_size: int,
    seed: int,
    loss: PointwiseLoss,
    chunk_size: int = 100_000,
    ratios: Optional[LikelihoodRatios] = None,
) -> IdentityCheck:
    """Monte Carlo estimates of E_train[r L] and E_test[L].

    Both expectations agree when `ratios` are the true likelihood ratios of
    `shift` (the default); other ratios serve as a negative control.

    Raises:
        core.SupportViolation: A group with test mass has no training mass.
        core.SizeError: `sample_size` below 1000.
    """
    if sample_size < 1000:
        raise core.SizeError(f"sample_size must be >= 1000, got {sample_size}")
    r = likelihood_ratios(shift) if ratios is None else ratios
    if len(r.r) != shift.n_groups:
        raise core.SizeError(f"{len(r.r)} ratios for {shift.n_groups} groups")
    train_seed, test_seed = np.random.SeedSequence(seed).spawn(2)
    weighted, se_train = _monte_carlo_mean(
        theta, shift.p_train, r.r, sampler, loss, sample_size, train_seed, chunk_size
    )
    unweighted, se_test = _monte_carlo_mean(
        theta,
        shift.p_test,
        np.ones(shift.n_groups),
        sampler,
        loss,
        sample_size,
        test_seed,
        chunk_size,
    )
    result = IdentityCheck(weighted, unweighted, math.hypot(se_train, se_test))
    log.debug(
        f"identity check: {weighted:.6f} vs {unweighted:.6f}, "
        f"z = {result.z_score:.2f}"
    )
    return result


def mean_and_sd(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation, sd 0 for a single value."""
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        raise core.SizeError("no values")
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0

