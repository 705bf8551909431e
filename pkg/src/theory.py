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

"""Bias-variance theory of weighted least squares for two groups.

The data generating process is y = a_g + x'beta + eps with x ~ N(0, I_d),
eps ~ N(0, sigma2) and a group specific intercept a_g. Group index 1 has
intercept `a1` and training share `p_train`, group index 2 has intercept
`a0`. The scalar weight p is the group weight of group index 1, the second
group gets 1 - p.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import math
from typing import Callable, Optional, Sequence

import numpy as np

import config
import core
import log_config
import misc
from dataset import GroupedDataset, Seed, as_array
from estimators import Theta, wls_fit

log = log_config.getLogger(__name__)

ConditionalSampler = Callable[
    [int, int, np.random.Generator], tuple[np.ndarray, np.ndarray]
]


@dataclasses.dataclass(frozen=True)
class LinRegDGP:
    a1: float
    a0: float
    sigma2: float
    d: int
    p_train: float
    beta: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if not self.sigma2 > 0:
            raise core.DomainError(f"sigma2 must be > 0, got {self.sigma2}")
        if not 0 < self.p_train < 1:
            raise core.DomainError(f"p_train must be in (0, 1), got {self.p_train}")
        if self.d < 0:
            raise core.DomainError(f"d must be >= 0, got {self.d}")
        beta = np.ones(self.d) if self.beta is None else np.array(self.beta, float)
        if beta.shape != (self.d,):
            raise core.SizeError(f"beta must have length {self.d}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @property
    def slopes(self) -> np.ndarray:
        assert self.beta is not None
        return self.beta

    @property
    def intercept_gap(self) -> float:
        return self.a1 - self.a0


@dataclasses.dataclass(frozen=True)
class TheoryPoint:
    p: float
    bias_sq: float
    variance: float
    expected_loss: float
    variance_bias_ratio: float
    # The closed form holds for large n only.
    large_n_approximation: bool = True


@dataclasses.dataclass(frozen=True)
class SimulationPoint:
    p: float
    mean_risk: float
    standard_error: float
    replications: int
    failures: int


def _check_probability(name: str, value: float) -> None:
    if not 0 <= value <= 1:
        raise core.DomainError(f"{name} must be in [0, 1], got {value}")


def bias_squared(p_test: float, p: float, a1: float, a0: float) -> float:
    """[p_te (1 - p)^2 + (1 - p_te) p^2] (a1 - a0)^2."""
    _check_probability("p_test", p_test)
    _check_probability("p", p)
    return (p_test * (1 - p) ** 2 + (1 - p_test) * p**2) * (a1 - a0) ** 2


def variance_term(sigma2: float, p: float, p_train: float, n: int, d: int) -> float:
    """sigma2 [p^2 / p_tr + (1 - p)^2 / (1 - p_tr)] (d + 1) / n.

    Raises:
        core.DomainError: p_train outside (0, 1) or n < 1.
    """
    if not 0 < p_train < 1:
        raise core.DomainError(f"p_train must be in (0, 1), got {p_train}")
    if n < 1:
        raise core.DomainError(f"n must be >= 1, got {n}")
    _check_probability("p", p)
    bracket = p**2 / p_train + (1 - p) ** 2 / (1 - p_train)
    return sigma2 * bracket * (d + 1) / n


def variance_bias_ratio(dgp: LinRegDGP, n: int) -> float:
    """sigma2 (d + 1) / (n (a1 - a0)^2 p_tr (1 - p_tr)), inf without bias."""
    gap2 = dgp.intercept_gap**2
    if gap2 == 0:
        return math.inf
    p_tr = dgp.p_train
    return dgp.sigma2 * (dgp.d + 1) / (n * gap2 * p_tr * (1 - p_tr))


def expected_loss_approx(
    dgp: LinRegDGP, p_test: float, p: float, n: int
) -> TheoryPoint:
    bias = bias_squared(p_test, p, dgp.a1, dgp.a0)
    variance = variance_term(dgp.sigma2, p, dgp.p_train, n, dgp.d)
    return TheoryPoint(
        p=p,
        bias_sq=bias,
        variance=variance,
        expected_loss=bias + variance + dgp.sigma2,
        variance_bias_ratio=variance_bias_ratio(dgp, n),
    )


def optimal_p(dgp: LinRegDGP, p_test: float, n: int) -> float:
    """Minimizer of the approximate expected loss.

    (p_te + eta p_tr) / (1 + eta) with eta the variance-bias ratio. Without
    an intercept gap only the variance matters and p_tr is returned.
    """
    _check_probability("p_test", p_test)
    if n < 1:
        raise core.DomainError(f"n must be >= 1, got {n}")
    if dgp.a1 == dgp.a0:
        return dgp.p_train
    eta = variance_bias_ratio(dgp, n)
    return (p_test + eta * dgp.p_train) / (1 + eta)


def theory_curve(
    dgp: LinRegDGP, p_test: float, n_grid: Sequence[int]
) -> list[tuple[int, float]]:
    if not n_grid:
        raise core.SizeError("n_grid must not be empty")
    return [(int(n), optimal_p(dgp, p_test, int(n))) for n in n_grid]


#
# Sampling
#


def group_sizes(dgp: LinRegDGP, n: int) -> tuple[int, int]:
    n1 = int(round(n * dgp.p_train))
    if n < 2 or not 1 <= n1 <= n - 1:
        raise core.SizeError(
            f"n = {n} with p_train = {dgp.p_train} leaves a group empty"
        )
    return n1, n - n1


def _draw(
    dgp: LinRegDGP, groups: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Design with intercept column and targets for the given group labels."""
    n = len(groups)
    x = rng.standard_normal((n, dgp.d))
    eps = rng.normal(0.0, math.sqrt(dgp.sigma2), n)
    intercepts = np.where(groups == 1, dgp.a1, dgp.a0)
    y = intercepts + x @ dgp.slopes + eps
    return np.column_stack([np.ones(n), x]), y


def sample_dgp(dgp: LinRegDGP, n: int, seed: Seed) -> GroupedDataset:
    """Draw n observations with fixed group sizes round(n p_tr) and the rest.

    Raises:
        core.SizeError: A group would be empty.
    """
    n1, n0 = group_sizes(dgp, n)
    groups = np.concatenate([np.ones(n1, dtype=int), np.full(n0, 2)])
    rng = np.random.default_rng(seed)
    features, targets = _draw(dgp, groups, rng)
    return GroupedDataset(features, targets, groups, 2)


def scalar_group_weights(dgp: LinRegDGP, p: float, groups: np.ndarray) -> np.ndarray:
    """w_i = p / p_tr for group index 1, (1 - p) / (1 - p_tr) otherwise."""
    return np.where(groups == 1, p / dgp.p_train, (1 - p) / (1 - dgp.p_train))


def conditional_test_risk(beta_hat: Theta, dgp: LinRegDGP, p_test: float) -> float:
    """Exact test risk of the coefficients (intercept first) under the DGP.

    sum_g P_te(g) (a_g - b_0)^2 + |beta - b_{1:d}|^2 + sigma2. Cross terms
    vanish because x ~ N(0, I).
    """
    b = as_array(beta_hat)
    if b.shape != (dgp.d + 1,):
        raise core.SizeError(f"coefficients need length {dgp.d + 1}, got {b.shape}")
    _check_probability("p_test", p_test)
    slope_error = dgp.slopes - b[1:]
    intercept_error = (
        p_test * (dgp.a1 - b[0]) ** 2 + (1 - p_test) * (dgp.a0 - b[0]) ** 2
    )
    return float(intercept_error + slope_error @ slope_error + dgp.sigma2)


def conditional_sampler(dgp: LinRegDGP) -> ConditionalSampler:
    """Draws (features, targets) of one group, p(y, x | g) of the DGP."""

    def sample(group: int, size: int, rng: np.random.Generator):
        return _draw(dgp, np.full(size, group), rng)

    return sample


def squared_loss(
    theta: Theta, features: np.ndarray, targets: np.ndarray
) -> np.ndarray:
    residual = targets - features @ as_array(theta)
    return residual * residual


def empirical_test_risk(
    beta_hat: Theta,
    dgp: LinRegDGP,
    p_test: float,
    n_samples: int,
    seed: int,
    chunk_size: int = 100_000,
) -> tuple[float, float]:
    """Monte Carlo test risk and its standard error from a sampled test set."""
    if n_samples < 2:
        raise core.SizeError("n_samples must be >= 2")
    chunks = math.ceil(n_samples / chunk_size)
    total = 0.0
    total_sq = 0.0
    for i, child in enumerate(misc.replication_seeds(seed, chunks)):
        size = min(chunk_size, n_samples - i * chunk_size)
        rng = np.random.default_rng(child)
        groups = np.where(rng.random(size) < p_test, 1, 2)
        features, targets = _draw(dgp, groups, rng)
        loss = squared_loss(beta_hat, features, targets)
        total += float(loss.sum())
        total_sq += float(loss @ loss)
    mean = total / n_samples
    variance = max(total_sq / n_samples - mean**2, 0.0) * n_samples / (n_samples - 1)
    return mean, math.sqrt(variance / n_samples)


def _simulate_replication(
    dgp: LinRegDGP,
    p_test: float,
    p_grid: Sequence[float],
    n: int,
    seed: np.random.SeedSequence,
) -> np.ndarray:
    """Risks of one dataset for every p, nan where the WLS fit is singular."""
    data = sample_dgp(dgp, n, seed)
    risks = np.full(len(p_grid), np.nan)
    for j, p in enumerate(p_grid):
        try:
            beta = wls_fit(data, scalar_group_weights(dgp, p, data.groups))
        except (core.SingularDesign, core.DegenerateWeights):
            continue
        risks[j] = conditional_test_risk(beta, dgp, p_test)
    return risks


def simulate_mse(
    dgp: LinRegDGP,
    p_test: float,
    p_grid: Sequence[float],
    n: int,
    replications: int,
    seed: int,
    workers: Optional[int] = None,
) -> list[SimulationPoint]:
    """Mean test risk and standard error of WLS for every p over replications.

    Every replication draws one dataset from its own child seed and fits all
    p on it. Results are collected in replication order, so the output does
    not depend on `workers`.

    Raises:
        core.SizeError: Less than two replications.
        core.SingularDesign: 1 % or more of the fits of a p were singular.
    """
    if replications < 2:
        raise core.SizeError("replications must be >= 2 to compute standard errors")
    if len(p_grid) == 0:
        raise core.SizeError("p_grid must not be empty")
    for p in p_grid:
        _check_probability("p", p)
    group_sizes(dgp, n)
    workers = config.WORKERS if workers is None else workers
    seeds = misc.replication_seeds(seed, replications)
    p_list = [float(p) for p in p_grid]

    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=workers, initializer=log_config.configure_worker
        ) as pool:
            rows = list(
                pool.map(
                    _simulate_replication,
                    *zip(*((dgp, p_test, p_list, n, s) for s in seeds)),
                    chunksize=max(1, replications // (4 * workers)),
                )
            )
    else:
        rows = [_simulate_replication(dgp, p_test, p_list, n, s) for s in seeds]
    risks = np.vstack(rows)

    points = []
    for j, p in enumerate(p_list):
        column = risks[:, j]
        ok = column[np.isfinite(column)]
        failures = replications - len(ok)
        if failures:
            log.warning(f"{failures} of {replications} WLS fits singular at {p=}")
        if failures >= 0.01 * replications or len(ok) < 2:
            raise core.SingularDesign(
                f"{failures} of {replications} replications singular at {p=}"
            )
        points.append(
            SimulationPoint(
                p=p,
                mean_risk=float(ok.mean()),
                standard_error=float(ok.std(ddof=1) / math.sqrt(len(ok))),
                replications=len(ok),
                failures=failures,
            )
        )
    return points
