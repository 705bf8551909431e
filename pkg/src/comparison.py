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

"""Paired comparison of standard and optimized weights over seeds."""

from __future__ import annotations

import concurrent.futures
import dataclasses
import functools
import math
from typing import Optional, Sequence

import numpy as np

import config
import core
import log_config
from bilevel import (
    BilevelConfig,
    BilevelResult,
    gdro_baseline_fit,
    optimize_dfr,
    optimize_gdro,
    optimize_gw_erm,
    optimize_jtt,
    optimize_subg,
)
from dataset import GroupedDataset, ParameterVector, split_indices
from estimators import PenaltySpec
from metrics import (
    MetricPair,
    PairedTestResult,
    mean_and_sd,
    metric_pair,
    paired_one_sided_t_test,
)
from synthetic import SyntheticShiftSpec, generate_balanced_test, generate_spurious
from weights import ShiftSpec

log = log_config.getLogger(__name__)

METRICS = ("weighted_average_accuracy", "worst_group_accuracy")


@dataclasses.dataclass(frozen=True)
class ComparisonSetup:
    method: core.Method
    generator: SyntheticShiftSpec = dataclasses.field(
        default_factory=SyntheticShiftSpec
    )
    bilevel: BilevelConfig = dataclasses.field(default_factory=BilevelConfig)
    # Share of the (possibly reduced) dataset used for the inner fits.
    train_fraction: float = config.TRAIN_FRACTION
    # Share of the generated dataset that is used at all.
    data_fraction: float = 1.0
    test_size: int = 10_000
    ensemble_size: int = config.ENSEMBLE_SIZE

    def __post_init__(self) -> None:
        if isinstance(self.method, str):
            object.__setattr__(self, "method", core.Method(self.method))
        if not 0 < self.train_fraction < 1:
            raise core.DomainError("train_fraction must be in (0, 1)")
        if not 0 < self.data_fraction <= 1:
            raise core.DomainError("data_fraction must be in (0, 1]")
        if self.test_size < 4:
            raise core.SizeError("test_size must be >= 4")


@dataclasses.dataclass(frozen=True)
class SeedOutcome:
    seed: int
    standard: MetricPair
    optimized: MetricPair
    standard_objective: float
    optimized_objective: float
    selected_step: int


@dataclasses.dataclass(frozen=True)
class MetricSummary:
    metric: str
    standard_mean: float
    standard_se: float
    optimized_mean: float
    optimized_se: float
    test: PairedTestResult


@dataclasses.dataclass(frozen=True)
class ComparisonResult:
    setup: ComparisonSetup
    outcomes: list[SeedOutcome]
    summaries: list[MetricSummary]

    def summary(self, metric: str) -> MetricSummary:
        for s in self.summaries:
            if s.metric == metric:
                return s
        raise KeyError(metric)


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    mean, sd = mean_and_sd(values)
    return mean, sd / math.sqrt(len(values))


def _reduce(data: GroupedDataset, fraction: float, seed: int) -> GroupedDataset:
    """Uniformly drawn share `fraction` of the observations."""
    if fraction >= 1:
        return data
    keep, _ = split_indices(data.n, max(1, round(fraction * data.n)), [seed, 2])
    return data.subset(keep)


def _optimize(
    setup: ComparisonSetup,
    data: GroupedDataset,
    shift: ShiftSpec,
    cfg: BilevelConfig,
) -> tuple[BilevelResult, ParameterVector]:
    """Optimized run and the parameters of the standard weights."""
    n_train = round(setup.train_fraction * data.n)
    if setup.method == core.Method.GW_ERM:
        result = optimize_gw_erm(data, shift, n_train, cfg)
    elif setup.method == core.Method.SUBG:
        result = optimize_subg(data, shift, n_train, cfg)
    elif setup.method == core.Method.DFR:
        result = optimize_dfr(data, shift, cfg, setup.ensemble_size, n_train)
    elif setup.method == core.Method.GDRO:
        result = optimize_gdro(data, n_train, cfg)
        baseline, _ = gdro_baseline_fit(
            data.subset(result.train_indices),
            cfg.penalty,
            cfg.solver,
            cfg.q_learning_rate,
            cfg.max_steps,
        )
        return result, baseline.theta
    elif setup.method == core.Method.JTT:
        result = optimize_jtt(data, n_train, cfg)
    else:
        raise NotImplementedError(f"method {setup.method} is not implemented")
    return result, result.initial_theta


def run_single_seed(setup: ComparisonSetup, seed: int) -> SeedOutcome:
    """Generate data of `seed`, run both arms on the same split, evaluate on a
    test set with equally weighted groups."""
    data, shift = generate_spurious(setup.generator, seed=[seed, 0])
    data = _reduce(data, setup.data_fraction, seed)
    test = generate_balanced_test(setup.generator, setup.test_size, [seed, 1])
    cfg = dataclasses.replace(setup.bilevel, seed=seed)

    result, standard_theta = _optimize(setup, data, shift, cfg)
    outcome = SeedOutcome(
        seed=seed,
        standard=metric_pair(standard_theta, test, shift.p_test),
        optimized=metric_pair(result.theta, test, shift.p_test),
        standard_objective=result.initial_objective,
        optimized_objective=result.objective,
        selected_step=result.selected_step,
    )
    log.info(
        f"seed {seed}: weighted average accuracy "
        f"{outcome.standard.weighted_average_accuracy:.4f} -> "
        f"{outcome.optimized.weighted_average_accuracy:.4f}, worst group "
        f"{outcome.standard.worst_group_accuracy:.4f} -> "
        f"{outcome.optimized.worst_group_accuracy:.4f}"
    )
    return outcome


def summarize(outcomes: Sequence[SeedOutcome]) -> list[MetricSummary]:
    summaries = []
    for metric in METRICS:
        standard = np.array([getattr(o.standard, metric) for o in outcomes])
        optimized = np.array([getattr(o.optimized, metric) for o in outcomes])
        standard_mean, standard_se = _mean_se(standard)
        optimized_mean, optimized_se = _mean_se(optimized)
        summaries.append(
            MetricSummary(
                metric=metric,
                standard_mean=standard_mean,
                standard_se=standard_se,
                optimized_mean=optimized_mean,
                optimized_se=optimized_se,
                test=paired_one_sided_t_test(standard, optimized),
            )
        )
    return summaries


def run_comparison(
    setup: ComparisonSetup,
    seeds: Sequence[int],
    workers: Optional[int] = None,
) -> ComparisonResult:
    """Run `setup` for every seed and test optimized > standard per metric.

    Seeds run in a process pool if `workers` > 1; outcomes keep the order
    of `seeds`.

    Raises:
        core.SizeError: Fewer than two seeds.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise core.SizeError(f"a paired comparison needs >= 2 seeds, got {len(seeds)}")
    workers = config.WORKERS if workers is None else workers
    log.info(f"Comparing {setup.method.value} over seeds {seeds}")
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=workers, initializer=log_config.configure_worker
        ) as pool:
            outcomes = list(pool.map(functools.partial(run_single_seed, setup), seeds))
    else:
        outcomes = [run_single_seed(setup, seed) for seed in seeds]
    return ComparisonResult(setup, outcomes, summarize(outcomes))


def run_sweep(
    setup: ComparisonSetup,
    sweep: core.Sweep,
    values: Sequence[float],
    seeds: Sequence[int],
    workers: Optional[int] = None,
) -> list[tuple[float, ComparisonResult]]:
    """One comparison per data fraction or penalty strength.

    The fraction sweep keeps the train/validation ratio of `setup`. The
    penalty sweep keeps the penalty kind (ridge if none is configured).
    """
    if not values:
        raise core.SizeError("sweep values must not be empty")
    results = []
    for value in values:
        if sweep == core.Sweep.FRACTION:
            point = dataclasses.replace(setup, data_fraction=float(value))
        elif sweep == core.Sweep.PENALTY:
            penalty = setup.bilevel.penalty
            kind = (
                core.PenaltyKind.RIDGE
                if penalty.kind == core.PenaltyKind.NONE
                else penalty.kind
            )
            point = dataclasses.replace(
                setup,
                bilevel=dataclasses.replace(
                    setup.bilevel,
                    penalty=PenaltySpec(kind, float(value), penalty.epsilon),
                ),
            )
        else:
            raise NotImplementedError(f"sweep {sweep} is not implemented")
        log.info(f"Sweep {sweep.value} = {value:g}")
        results.append((float(value), run_comparison(point, seeds, workers)))
    return results
