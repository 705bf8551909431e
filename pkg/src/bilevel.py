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

import abc
import dataclasses
from typing import Optional, Sequence, Union

import numpy as np

import config
import core
import log_config
from dataset import GroupedDataset, ParameterVector, empirical_marginals, split_indices
from estimators import (
    FitResult,
    PenaltySpec,
    SolverConfig,
    dfr_ensemble_fit,
    logistic_fit,
    logistic_pointwise_loss,
    predict,
    subg_fit,
    weighted_logistic_loss,
)
from hypergrad import (
    HypergradReport,
    ensemble_hypergradient_v,
    hypergradient_p,
    hypergradient_v,
)
from weights import (
    LossWeights,
    ShiftSpec,
    SimplexWeights,
    SubsampleFractions,
    likelihood_ratios,
    normalize_simplex,
    per_observation_weights,
)

log = log_config.getLogger(__name__)

Weights = Union[SimplexWeights, SubsampleFractions]


@dataclasses.dataclass(frozen=True)
class BilevelConfig:
    learning_rate: float = config.LEARNING_RATE
    momentum: float = config.MOMENTUM
    max_steps: int = config.MAX_STEPS
    q_learning_rate: float = config.Q_LEARNING_RATE
    damping: float = config.IFT_DAMPING
    penalty: PenaltySpec = dataclasses.field(default_factory=PenaltySpec.from_config)
    solver: SolverConfig = dataclasses.field(default_factory=SolverConfig)
    seed: int = 0
    # Floor of the subsample fractions, defaults to 1 / max_g n_g.
    v_min: Optional[float] = None
    allow_zero_fractions: bool = False
    resplit_attempts: int = config.RESPLIT_ATTEMPTS
    warm_start: bool = True
    stratified_split: bool = False
    cross_validation_folds: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise core.DomainError(f"learning_rate must be > 0: {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise core.DomainError(f"momentum must be in [0, 1): {self.momentum}")
        if self.max_steps < 0:
            raise core.DomainError(f"max_steps must be >= 0: {self.max_steps}")
        if not self.q_learning_rate > 0:
            raise core.DomainError("q_learning_rate must be > 0")
        if not self.damping >= 0:
            raise core.DomainError("damping must be >= 0")
        if self.v_min is not None and not 0 <= self.v_min <= 1:
            raise core.DomainError(f"v_min must be in [0, 1]: {self.v_min}")
        if self.resplit_attempts < 1:
            raise core.DomainError("resplit_attempts must be >= 1")
        if not self.penalty.differentiable:
            raise core.NotDifferentiable(
                "bi-level optimization needs a twice differentiable penalty, "
                "use ridge or smoothed-l1"
            )
        if self.cross_validation_folds is not None:
            raise NotImplementedError(
                "cross-validation over several splits is not supported yet"
            )


@dataclasses.dataclass(frozen=True)
class TraceRecord:
    """Snapshot of outer step `step`.

    `weights` were used for the inner fit of this step, `hypergradient` and
    `q` are the values the update to the next step is computed from (absent
    in the last step).
    """

    step: int
    weights: np.ndarray
    objective: float
    validation_loss: float
    group_losses: np.ndarray
    momentum: np.ndarray
    inner_iterations: int
    inner_converged: bool
    inner_gradient_norm: float
    q: Optional[np.ndarray] = None
    hypergradient: Optional[np.ndarray] = None
    damping_used: Optional[float] = None
    condition_estimate: Optional[float] = None
    solve_residual: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "weights": self.weights,
            "q": self.q,
            "objective": self.objective,
            "validation_loss": self.validation_loss,
            "group_losses": self.group_losses,
            "hypergradient": self.hypergradient,
            "momentum": self.momentum,
            "inner_iterations": self.inner_iterations,
            "inner_converged": self.inner_converged,
            "inner_gradient_norm": self.inner_gradient_norm,
            "damping_used": self.damping_used,
            "condition_estimate": self.condition_estimate,
            "solve_residual": self.solve_residual,
        }


@dataclasses.dataclass(frozen=True)
class BilevelResult:
    method: core.Method
    weights: Weights
    theta: ParameterVector
    initial_weights: Weights
    initial_theta: ParameterVector
    trace: list[TraceRecord]
    selected_step: int
    train_indices: np.ndarray
    val_indices: np.ndarray
    q: Optional[LossWeights] = None
    pinned_group: Optional[int] = None
    inferred_groups: Optional[np.ndarray] = None
    inferred_labels: Optional[list[str]] = None
    merges: list[tuple[str, str]] = dataclasses.field(default_factory=list)
    jtt_upweight: Optional[float] = None

    @property
    def objective(self) -> float:
        return self.trace[self.selected_step].objective

    @property
    def initial_objective(self) -> float:
        return self.trace[0].objective


@dataclasses.dataclass(frozen=True)
class InnerFit:
    theta: ParameterVector
    iterations: int
    converged: bool
    gradient_norm: float
    members: Optional[list[ParameterVector]] = None
    member_indices: Optional[list[np.ndarray]] = None

    @classmethod
    def from_fit(cls, fit: FitResult) -> InnerFit:
        return cls(fit.theta, fit.iterations, fit.converged, fit.gradient_norm)


#
# Weight updates
#


def exp_grad_step(
    p: SimplexWeights,
    zeta: np.ndarray,
    u_prev: np.ndarray,
    learning_rate: float,
    momentum: float,
) -> tuple[SimplexWeights, np.ndarray]:
    """Momentum exponentiated gradient step, p_new ~ p exp(eta u_new).

    u_new = momentum u_prev + (1 - momentum) zeta. The update runs in the log
    domain with the maximum subtracted, positive entries stay positive.
    """
    zeta = np.asarray(zeta, dtype=float)
    u = momentum * np.asarray(u_prev, dtype=float) + (1 - momentum) * zeta
    if not np.all(np.isfinite(u)):
        raise core.DegenerateWeights(f"non-finite momentum buffer {u}")
    positive = p.p > 0
    logits = np.full(len(p), -np.inf)
    logits[positive] = np.log(p.p[positive]) + learning_rate * u[positive]
    raw = np.exp(logits - logits[positive].max())
    raw[positive] = np.maximum(raw[positive], np.finfo(float).tiny)
    return normalize_simplex(raw), u


def gdro_q_step(
    q: LossWeights, group_losses: np.ndarray, q_learning_rate: float
) -> LossWeights:
    """q_new ~ q exp(eta_q L_g), normalized."""
    losses = np.asarray(group_losses, dtype=float)
    logits = np.log(q.q) + q_learning_rate * losses
    raw = np.exp(logits - logits.max())
    return LossWeights(raw / raw.sum())


def fraction_step(
    v: SubsampleFractions,
    zeta: np.ndarray,
    u_prev: np.ndarray,
    learning_rate: float,
    momentum: float,
    v_min: float,
    pinned_group: int,
) -> tuple[SubsampleFractions, np.ndarray]:
    """Momentum step on log v without normalization, clamped to [v_min, 1]."""
    u = momentum * np.asarray(u_prev, dtype=float) + (1 - momentum) * zeta
    with np.errstate(divide="ignore"):
        log_v = np.log(v.v) + learning_rate * u
    new = np.clip(np.exp(log_v), v_min, 1.0)
    new[pinned_group - 1] = 1.0
    return SubsampleFractions(new), u


#
# Validation objectives
#


def group_mean_losses(theta: ParameterVector, val: GroupedDataset) -> np.ndarray:
    """Mean log loss per group, nan for groups without observations."""
    loss = logistic_pointwise_loss(theta, val)
    sums = np.bincount(val.groups - 1, weights=loss, minlength=val.G)
    counts = val.group_counts
    means = np.full(val.G, np.nan)
    means[counts > 0] = sums[counts > 0] / counts[counts > 0]
    return means


def q_observation_weights(val: GroupedDataset, q: LossWeights) -> np.ndarray:
    """q_g n / n_g, so the (1/n)-weighted loss equals sum_g q_g L_g."""
    counts = val.group_counts
    if np.any(counts == 0):
        raise core.EmptyGroup("every group needs validation observations")
    return q.q[val.groups - 1] * val.n / counts[val.groups - 1]


def select_best(objectives: Sequence[float]) -> int:
    """Index of the smallest objective, the earliest one on ties."""
    values = np.asarray(objectives, dtype=float)
    if values.size == 0:
        raise core.SizeError("empty trace")
    if np.all(np.isnan(values)):
        return 0
    return int(np.nanargmin(values))


#
# Splitting
#


def split_with_coverage(
    data: GroupedDataset,
    n_train: int,
    seed: int,
    attempts: int = config.RESPLIT_ATTEMPTS,
    stratified: bool = False,
    require_train_coverage: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Split until every group is present in the validation half and, if
    requested, in the training half.

    Attempt 0 uses `seed` itself, attempt k the seed sequence (seed, k).

    Raises:
        core.GroupCoverage: No valid split within `attempts`.
    """
    needed = 2 if require_train_coverage else 1
    counts = data.group_counts
    if np.any(counts < needed):
        raise core.GroupCoverage(
            f"groups {(np.flatnonzero(counts < needed) + 1).tolist()} have too "
            "few observations to appear in both halves"
        )
    groups = data.groups if stratified else None
    for attempt in range(attempts):
        split_seed: Union[int, list[int]] = seed if attempt == 0 else [seed, attempt]
        train_idx, val_idx = split_indices(data.n, n_train, split_seed, groups)
        in_val = np.bincount(data.groups[val_idx] - 1, minlength=data.G) > 0
        in_train = np.bincount(data.groups[train_idx] - 1, minlength=data.G) > 0
        if np.all(in_val) and (np.all(in_train) or not require_train_coverage):
            return train_idx, val_idx
        log.warning(f"Split {attempt} lost a group, resplitting.")
    raise core.GroupCoverage(
        f"no split with every group in both halves after {attempts} attempts"
    )


#
# Outer loop
#


class OuterProblem(abc.ABC):
    """A bi-level method: inner fit, outer objective, hypergradient, update.

    `run` executes the shared loop. Step t fits the inner model at the
    current weights, evaluates the outer objective and, except in the last
    step, updates the weights with the negative hypergradient.
    """

    def __init__(
        self, train: GroupedDataset, val: GroupedDataset, cfg: BilevelConfig
    ) -> None:
        self.train = train
        self.val = val
        self.cfg = cfg

    @abc.abstractmethod
    def _fit_(self, weights: Weights, initial: Optional[InnerFit]) -> InnerFit:
        """Fit the inner model at `weights`."""
        raise NotImplementedError

    @abc.abstractmethod
    def _objective_(self, fit: InnerFit) -> tuple[float, float, np.ndarray]:
        """Outer objective, weighted validation loss and per-group losses."""
        raise NotImplementedError

    @abc.abstractmethod
    def _hypergradient_(self, weights: Weights, fit: InnerFit) -> HypergradReport:
        raise NotImplementedError

    @abc.abstractmethod
    def _update_(
        self, weights: Weights, zeta: np.ndarray, u_prev: np.ndarray
    ) -> tuple[Weights, np.ndarray]:
        raise NotImplementedError

    def _after_step_(self, group_losses: np.ndarray) -> None:
        """Hook for state updated once per step (loss weights)."""

    def _q_(self) -> Optional[np.ndarray]:
        return None

    def run(self, initial: Weights) -> tuple[list[TraceRecord], list[InnerFit]]:
        weights = initial
        u = np.zeros(len(initial))
        trace: list[TraceRecord] = []
        fits: list[InnerFit] = []
        previous: Optional[InnerFit] = None
        for step in range(self.cfg.max_steps + 1):
            fit = self._fit_(weights, previous if self.cfg.warm_start else None)
            objective, val_loss, group_losses = self._objective_(fit)
            report: Optional[HypergradReport] = None
            q = self._q_()
            if step < self.cfg.max_steps:
                report = self._hypergradient_(weights, fit)
                zeta = np.where(report.update_mask, -report.gradient, 0.0)
                next_weights, next_u = self._update_(weights, zeta, u)
            trace.append(
                TraceRecord(
                    step=step,
                    weights=_weights_array(weights).copy(),
                    objective=objective,
                    validation_loss=val_loss,
                    group_losses=group_losses,
                    momentum=u,
                    inner_iterations=fit.iterations,
                    inner_converged=fit.converged,
                    inner_gradient_norm=fit.gradient_norm,
                    q=None if q is None else q.copy(),
                    hypergradient=None if report is None else report.gradient,
                    damping_used=None if report is None else report.damping_used,
                    condition_estimate=(
                        None if report is None else report.hessian_condition_estimate
                    ),
                    solve_residual=None if report is None else report.solve_residual,
                )
            )
            fits.append(fit)
            log.debug(
                f"step {step:3d}: objective {objective:.6f}, "
                f"weights {np.array2string(_weights_array(weights), precision=4)}"
            )
            self._after_step_(group_losses)
            if report is not None:
                weights, u = next_weights, next_u
            previous = fit
        return trace, fits


def _weights_array(weights: Weights) -> np.ndarray:
    return weights.p if isinstance(weights, SimplexWeights) else weights.v


class GroupWeightProblem(OuterProblem):
    """GW-ERM: p-weighted training loss, r-weighted validation loss."""

    def __init__(
        self,
        train: GroupedDataset,
        val: GroupedDataset,
        cfg: BilevelConfig,
        shift: ShiftSpec,
        val_weights: Optional[np.ndarray] = None,
    ) -> None:
        super().__init__(train, val, cfg)
        self.shift = shift
        if val_weights is None:
            val_weights = likelihood_ratios(shift).r[val.groups - 1]
        self.val_weights = val_weights

    def _fit_(self, weights: Weights, initial: Optional[InnerFit]) -> InnerFit:
        assert isinstance(weights, SimplexWeights)
        w = per_observation_weights(weights, self.shift, self.train.groups)
        start = None if initial is None else initial.theta
        fit = logistic_fit(self.train, w, self.cfg.penalty, self.cfg.solver, start)
        return InnerFit.from_fit(fit)

    def _objective_(self, fit: InnerFit) -> tuple[float, float, np.ndarray]:
        loss = weighted_logistic_loss(
            fit.theta, self.val, self.val_weights, PenaltySpec.none()
        )
        return loss, loss, group_mean_losses(fit.theta, self.val)

    def _hypergradient_(self, weights: Weights, fit: InnerFit) -> HypergradReport:
        assert isinstance(weights, SimplexWeights)
        return hypergradient_p(
            fit.theta,
            weights,
            self.train,
            self.val,
            self.shift,
            self.cfg.penalty,
            self.cfg.damping,
            self.cfg.solver.gradient_tolerance,
            val_weights=self.val_weights,
        )

    def _update_(
        self, weights: Weights, zeta: np.ndarray, u_prev: np.ndarray
    ) -> tuple[Weights, np.ndarray]:
        assert isinstance(weights, SimplexWeights)
        return exp_grad_step(
            weights, zeta, u_prev, self.cfg.learning_rate, self.cfg.momentum
        )


class WorstGroupProblem(GroupWeightProblem):
    """GDRO objective: select by the worst validation group loss and follow
    the gradient of the q-weighted validation loss.

    The weighting groups of `train` (true or inferred) may differ from the
    validation groups, which are always the true ones.
    """

    def __init__(
        self,
        train: GroupedDataset,
        val: GroupedDataset,
        cfg: BilevelConfig,
        shift: ShiftSpec,
    ) -> None:
        q = LossWeights.uniform(val.G)
        super().__init__(train, val, cfg, shift, q_observation_weights(val, q))
        self.q = q

    def _objective_(self, fit: InnerFit) -> tuple[float, float, np.ndarray]:
        group_losses = group_mean_losses(fit.theta, self.val)
        weighted = float(self.q.q @ group_losses)
        return float(np.max(group_losses)), weighted, group_losses

    def _q_(self) -> Optional[np.ndarray]:
        return self.q.q

    def _after_step_(self, group_losses: np.ndarray) -> None:
        self.q = gdro_q_step(self.q, group_losses, self.cfg.q_learning_rate)
        self.val_weights = q_observation_weights(self.val, self.q)


class FractionProblem(OuterProblem):
    """SUBG: relaxed subsampling objective in the fractions v."""

    def __init__(
        self,
        train: GroupedDataset,
        val: GroupedDataset,
        cfg: BilevelConfig,
        shift: ShiftSpec,
        pinned_group: int,
        v_min: float,
    ) -> None:
        super().__init__(train, val, cfg)
        self.shift = shift
        self.pinned_group = pinned_group
        self.v_min = v_min
        self.val_weights = likelihood_ratios(shift).r[val.groups - 1]

    def _fit_(self, weights: Weights, initial: Optional[InnerFit]) -> InnerFit:
        assert isinstance(weights, SubsampleFractions)
        start = None if initial is None else initial.theta
        fit = subg_fit(self.train, weights, self.cfg.penalty, self.cfg.solver, start)
        return InnerFit.from_fit(fit)

    def _objective_(self, fit: InnerFit) -> tuple[float, float, np.ndarray]:
        loss = weighted_logistic_loss(
            fit.theta, self.val, self.val_weights, PenaltySpec.none()
        )
        return loss, loss, group_mean_losses(fit.theta, self.val)

    def _hypergradient_(self, weights: Weights, fit: InnerFit) -> HypergradReport:
        assert isinstance(weights, SubsampleFractions)
        return hypergradient_v(
            fit.theta,
            weights,
            self.train,
            self.val,
            self.shift,
            self.cfg.penalty,
            self.cfg.damping,
            self.cfg.solver.gradient_tolerance,
            pinned_group=self.pinned_group,
            val_weights=self.val_weights,
        )

    def _update_(
        self, weights: Weights, zeta: np.ndarray, u_prev: np.ndarray
    ) -> tuple[Weights, np.ndarray]:
        assert isinstance(weights, SubsampleFractions)
        return fraction_step(
            weights,
            zeta,
            u_prev,
            self.cfg.learning_rate,
            self.cfg.momentum,
            self.v_min,
            self.pinned_group,
        )


class EnsembleFractionProblem(FractionProblem):
    """DFR: averaged ensemble of subsample fits, mean member hypergradient.

    Members reuse their subsample seeds in every step.
    """

    def __init__(
        self,
        train: GroupedDataset,
        val: GroupedDataset,
        cfg: BilevelConfig,
        shift: ShiftSpec,
        pinned_group: int,
        v_min: float,
        ensemble_size: int,
    ) -> None:
        super().__init__(train, val, cfg, shift, pinned_group, v_min)
        self.ensemble_size = ensemble_size

    def _fit_(self, weights: Weights, initial: Optional[InnerFit]) -> InnerFit:
        assert isinstance(weights, SubsampleFractions)
        starts = None if initial is None else initial.members
        ensemble = dfr_ensemble_fit(
            self.train,
            weights,
            self.ensemble_size,
            self.cfg.penalty,
            self.cfg.solver,
            seed=self.cfg.seed,
            initial=starts,
        )
        return InnerFit(
            ensemble.theta,
            ensemble.iterations,
            ensemble.converged,
            max(fit.gradient_norm for fit in ensemble.members),
            [fit.theta for fit in ensemble.members],
            ensemble.member_indices,
        )

    def _hypergradient_(self, weights: Weights, fit: InnerFit) -> HypergradReport:
        assert isinstance(weights, SubsampleFractions) and fit.members is not None
        assert fit.member_indices is not None
        return ensemble_hypergradient_v(
            fit.members,
            fit.theta,
            weights,
            self.train,
            self.val,
            self.shift,
            self.cfg.penalty,
            self.cfg.damping,
            pinned_group=self.pinned_group,
            val_weights=self.val_weights,
            member_data=[self.train.subset(rows) for rows in fit.member_indices],
            tolerance=self.cfg.solver.gradient_tolerance,
        )


#
# Methods
#


def _split(
    data: GroupedDataset,
    n_train: int,
    cfg: BilevelConfig,
    require_train_coverage: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    return split_with_coverage(
        data,
        n_train,
        cfg.seed,
        cfg.resplit_attempts,
        cfg.stratified_split,
        require_train_coverage,
    )


def _result(
    method: core.Method,
    trace: list[TraceRecord],
    fits: list[InnerFit],
    initial: Weights,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    **kwargs,
) -> BilevelResult:
    best = select_best([record.objective for record in trace])
    weights_array = trace[best].weights
    weights: Weights = (
        SimplexWeights(weights_array)
        if isinstance(initial, SimplexWeights)
        else SubsampleFractions(weights_array)
    )
    log.info(
        f"{method.value}: selected step {best} of {len(trace) - 1}, objective "
        f"{trace[best].objective:.6f} (initial {trace[0].objective:.6f})"
    )
    return BilevelResult(
        method=method,
        weights=weights,
        theta=fits[best].theta,
        initial_weights=initial,
        initial_theta=fits[0].theta,
        trace=trace,
        selected_step=best,
        train_indices=train_idx,
        val_indices=val_idx,
        **kwargs,
    )


def optimize_gw_erm(
    data: GroupedDataset, shift: ShiftSpec, n_train: int, cfg: BilevelConfig
) -> BilevelResult:
    """Optimize the group weights p of the weighted training loss.

    Starts at p_0 = p_test, i.e. observation weights equal to the likelihood
    ratios, and returns the iterate with the smallest r-weighted validation
    loss.
    """
    if shift.n_groups != data.G:
        raise core.SizeError(f"shift has {shift.n_groups} groups, data {data.G}")
    train_idx, val_idx = _split(data, n_train, cfg)
    train, val = data.subset(train_idx), data.subset(val_idx)
    p0 = SimplexWeights(shift.p_test)
    trace, fits = GroupWeightProblem(train, val, cfg, shift).run(p0)
    return _result(core.Method.GW_ERM, trace, fits, p0, train_idx, val_idx)


def _fraction_setup(
    train: GroupedDataset, cfg: BilevelConfig, pinned_group: Optional[int]
) -> tuple[SubsampleFractions, int, float]:
    counts = train.group_counts
    v0 = SubsampleFractions.balancing(counts)
    if pinned_group is None:
        pinned_group = int(np.argmin(counts)) + 1
    elif not 1 <= pinned_group <= train.G:
        raise core.DomainError(f"pinned_group must be in 1..{train.G}")
    else:
        v = v0.v.copy()
        v[pinned_group - 1] = 1.0
        v0 = SubsampleFractions(v)
    if cfg.v_min is not None:
        v_min = cfg.v_min
    else:
        v_min = 0.0 if cfg.allow_zero_fractions else 1.0 / counts.max()
    if v_min == 0 and not cfg.allow_zero_fractions:
        raise core.DomainError("v_min = 0 needs allow_zero_fractions")
    v0 = SubsampleFractions(np.clip(v0.v, v_min, 1.0))
    return v0, pinned_group, v_min


def optimize_subg(
    data: GroupedDataset,
    shift: ShiftSpec,
    n_train: int,
    cfg: BilevelConfig,
    pinned_group: Optional[int] = None,
) -> BilevelResult:
    """Optimize the subsample fractions v of the relaxed SUBG objective.

    Starts at the group balancing fractions min_h n_h / n_g of the training
    half. The pinned group (default: the smallest one) stays at 1.
    """
    train_idx, val_idx = _split(data, n_train, cfg)
    train, val = data.subset(train_idx), data.subset(val_idx)
    v0, pinned, v_min = _fraction_setup(train, cfg, pinned_group)
    problem = FractionProblem(train, val, cfg, shift, pinned, v_min)
    trace, fits = problem.run(v0)
    return _result(
        core.Method.SUBG, trace, fits, v0, train_idx, val_idx, pinned_group=pinned
    )


def optimize_dfr(
    data: GroupedDataset,
    shift: ShiftSpec,
    cfg: BilevelConfig,
    ensemble_size: int = config.ENSEMBLE_SIZE,
    n_train: Optional[int] = None,
    pinned_group: Optional[int] = None,
) -> BilevelResult:
    """Optimize v for an averaged ensemble of subsample fits.

    The ensemble is fitted on the first `n_train` observations of the split
    (default n // 2), the remaining ones form the validation set.
    """
    n_train = data.n // 2 if n_train is None else n_train
    train_idx, val_idx = _split(data, n_train, cfg)
    train, val = data.subset(train_idx), data.subset(val_idx)
    v0, pinned, v_min = _fraction_setup(train, cfg, pinned_group)
    problem = EnsembleFractionProblem(
        train, val, cfg, shift, pinned, v_min, ensemble_size
    )
    trace, fits = problem.run(v0)
    return _result(
        core.Method.DFR, trace, fits, v0, train_idx, val_idx, pinned_group=pinned
    )


def optimize_gdro(
    data: GroupedDataset, n_train: int, cfg: BilevelConfig
) -> BilevelResult:
    """Optimize p for the worst validation group loss.

    Observation weights use the empirical group marginals of the training
    half. p and q start uniform.
    """
    train_idx, val_idx = _split(data, n_train, cfg)
    train, val = data.subset(train_idx), data.subset(val_idx)
    p_train = empirical_marginals(train)
    shift = ShiftSpec(p_train, p_train)
    p0 = SimplexWeights(np.full(data.G, 1.0 / data.G))
    problem = WorstGroupProblem(train, val, cfg, shift)
    trace, fits = problem.run(p0)
    return _result(
        core.Method.GDRO, trace, fits, p0, train_idx, val_idx, q=problem.q
    )


def gdro_baseline_fit(
    train: GroupedDataset,
    penalty: PenaltySpec,
    solver: Optional[SolverConfig] = None,
    q_learning_rate: float = config.Q_LEARNING_RATE,
    steps: int = config.MAX_STEPS,
) -> tuple[FitResult, LossWeights]:
    """Standard GDRO on the training data, full batch.

    Alternates a fit of sum_g q_g L_g with q ~ q exp(eta_q L_g) on the
    training group losses.
    """
    q = LossWeights.uniform(train.G)
    fit = logistic_fit(train, q_observation_weights(train, q), penalty, solver)
    for _ in range(steps):
        q = gdro_q_step(q, group_mean_losses(fit.theta, train), q_learning_rate)
        fit = logistic_fit(
            train, q_observation_weights(train, q), penalty, solver, fit.theta
        )
    return fit, q


@dataclasses.dataclass(frozen=True)
class IdentificationConfig:
    """Penalty and solver of the JTT identification model."""

    penalty: Optional[PenaltySpec] = None
    solver: Optional[SolverConfig] = None


@dataclasses.dataclass(frozen=True)
class InferredGroups:
    groups: np.ndarray
    labels: list[str]
    incorrect: np.ndarray
    merges: list[tuple[str, str]]

    @property
    def n_groups(self) -> int:
        return len(self.labels)


def _cell_label(cell: int) -> str:
    y, incorrect = divmod(cell - 1, 2)
    return f"y={y},{'incorrect' if incorrect else 'correct'}"


def infer_groups(theta: ParameterVector, train: GroupedDataset) -> InferredGroups:
    """Cells (class, misclassified) of the identification model.

    Cell 2y + incorrect + 1. An empty cell is merged into the other cell of
    its class.

    Raises:
        core.EmptyInferredGroup: A class has no training observation.
    """
    incorrect = (predict(theta, train) != train.targets).astype(int)
    cells = 2 * train.targets.astype(int) + incorrect + 1
    counts = np.bincount(cells, minlength=5)[1:]
    merges = []
    for y in (0, 1):
        correct_cell, incorrect_cell = 2 * y + 1, 2 * y + 2
        if counts[correct_cell - 1] == 0 and counts[incorrect_cell - 1] == 0:
            raise core.EmptyInferredGroup(f"class {y} has no training observations")
        for empty, other in (
            (incorrect_cell, correct_cell),
            (correct_cell, incorrect_cell),
        ):
            if counts[empty - 1] == 0:
                merges.append((_cell_label(empty), _cell_label(other)))
                log.warning(
                    f"Inferred group {_cell_label(empty)} is empty, "
                    f"merged into {_cell_label(other)}."
                )
    present = np.flatnonzero(counts > 0) + 1
    relabel = np.zeros(5, dtype=int)
    relabel[present] = np.arange(1, len(present) + 1)
    cell_incorrect = np.array([(cell - 1) % 2 == 1 for cell in present])
    return InferredGroups(
        groups=relabel[cells],
        labels=[_cell_label(cell) for cell in present],
        incorrect=cell_incorrect,
        merges=merges,
    )


def jtt_weights(
    p_train: np.ndarray, incorrect: np.ndarray, upweight: float
) -> SimplexWeights:
    """Group weights of a single upweighting factor for misclassified cells."""
    return normalize_simplex(p_train * np.where(incorrect, upweight, 1.0))


def jtt_upweight_search(
    train: GroupedDataset,
    val: GroupedDataset,
    incorrect: np.ndarray,
    penalty: PenaltySpec,
    solver: Optional[SolverConfig] = None,
    grid: Sequence[float] = config.JTT_UPWEIGHTS,
) -> tuple[float, SimplexWeights, FitResult, float]:
    """Standard JTT: pick the upweight with the smallest worst validation
    group loss, the earliest one on ties.

    `train` carries inferred groups, `val` true groups.
    """
    p_train = empirical_marginals(train)
    shift = ShiftSpec(p_train, p_train)
    best: Optional[tuple[float, SimplexWeights, FitResult, float]] = None
    for upweight in grid:
        p = jtt_weights(p_train, incorrect, upweight)
        w = per_observation_weights(p, shift, train.groups)
        fit = logistic_fit(train, w, penalty, solver)
        worst = float(np.max(group_mean_losses(fit.theta, val)))
        log.debug(f"JTT upweight {upweight:g}: worst group loss {worst:.6f}")
        if best is None or worst < best[3]:
            best = (upweight, p, fit, worst)
    assert best is not None
    return best


def optimize_jtt(
    data: GroupedDataset,
    n_train: int,
    cfg: BilevelConfig,
    identification: Optional[IdentificationConfig] = None,
) -> BilevelResult:
    """Optimize one weight per inferred group for the worst true group loss.

    True group labels are only read on the validation half. The training half
    is grouped by the errors of an unweighted identification model and the
    loop starts at the best standard JTT upweight.
    """
    identification = identification or IdentificationConfig()
    train_idx, val_idx = _split(data, n_train, cfg, require_train_coverage=False)
    val = data.subset(val_idx)
    unlabeled = data.subset(train_idx)
    unlabeled = unlabeled.with_groups(np.ones(unlabeled.n, dtype=int), 1)

    id_fit = logistic_fit(
        unlabeled,
        np.ones(unlabeled.n),
        identification.penalty or cfg.penalty,
        identification.solver or cfg.solver,
    )
    inferred = infer_groups(id_fit.theta, unlabeled)
    train = unlabeled.with_groups(inferred.groups, inferred.n_groups)

    upweight, p0, _, _ = jtt_upweight_search(
        train, val, inferred.incorrect, cfg.penalty, cfg.solver
    )
    log.info(f"JTT start: upweight {upweight:g}, groups {inferred.labels}")
    p_train = empirical_marginals(train)
    problem = WorstGroupProblem(train, val, cfg, ShiftSpec(p_train, p_train))
    trace, fits = problem.run(p0)
    return _result(
        core.Method.JTT,
        trace,
        fits,
        p0,
        train_idx,
        val_idx,
        q=problem.q,
        inferred_groups=inferred.groups,
        inferred_labels=inferred.labels,
        merges=inferred.merges,
        jtt_upweight=upweight,
    )
