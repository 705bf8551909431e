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

"""Hypergradients of the validation loss with respect to group weights.

At a stationary point of the training objective h(theta, lambda) the
implicit function theorem gives

    d theta / d lambda = -(d2h / dtheta dlambda) H^{-1}

(as a K x dim matrix, H the Hessian in theta). The hypergradient is this
Jacobian applied to the gradient of the validation loss.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

import config
import core
import log_config
from dataset import GroupedDataset
from estimators import (
    PenaltySpec,
    Theta,
    group_gradient_sums,
    logistic_gradient,
    logistic_hessian,
    subg_observation_weights,
    subg_sample_size,
    weighted_logistic_loss,
)
from weights import (
    ShiftSpec,
    SimplexWeights,
    SubsampleFractions,
    likelihood_ratios,
    per_observation_weights,
)

log = log_config.getLogger(__name__)

# Damping this many times the largest Hessian eigenvalue suppresses the
# gradient, which is flagged in the report.
SUPPRESSION_RATIO = 1e6


@dataclasses.dataclass(frozen=True)
class IFTSolution:
    jacobian: np.ndarray
    condition_estimate: float
    residual: float
    suppressed: bool


@dataclasses.dataclass(frozen=True)
class HypergradReport:
    """Hypergradient and solve diagnostics of one outer step.

    `gradient` has one entry per group. For simplex weights it is the
    zero-sum tangent vector, the free coordinates (last group as pivot) are
    in `pivot_gradient`. Entries with `update_mask` False are reported but
    must not be updated (pinned subsample fraction).
    """

    gradient: np.ndarray
    hessian_condition_estimate: float
    solve_residual: float
    damping_used: float
    validation_loss: float
    update_mask: np.ndarray
    suppressed: bool = False
    pivot_gradient: Optional[np.ndarray] = None
    member_gradients: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "gradient": self.gradient,
            "hessian_condition_estimate": self.hessian_condition_estimate,
            "solve_residual": self.solve_residual,
            "damping_used": self.damping_used,
            "suppressed": self.suppressed,
        }


def _require_groups(train: GroupedDataset) -> np.ndarray:
    counts = train.group_counts
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise core.EmptyGroup(
            f"groups {(empty + 1).tolist()} have no training observations"
        )
    return counts


def cross_derivative_p(
    theta_hat: Theta,
    train: GroupedDataset,
    shift: ShiftSpec,
    penalty: Optional[PenaltySpec] = None,
) -> np.ndarray:
    """d2h / dtheta dp_g for the free coordinates g = 1..G-1.

    With p_G = 1 - sum_{g<G} p_g, row g is the theta-gradient of
    (1/n) [sum_{i in g} loss_i / p_tr(g) - sum_{i in G} loss_i / p_tr(G)].
    The penalty does not depend on p.

    Raises:
        core.EmptyGroup: A group has no training observations.
    """
    _require_groups(train)
    if shift.n_groups != train.G:
        raise core.SizeError(f"shift has {shift.n_groups} groups, data {train.G}")
    sums = group_gradient_sums(theta_hat, train) / shift.p_train[:, None]
    return (sums[:-1] - sums[-1]) / train.n


def cross_derivative_v(
    theta_hat: Theta,
    train: GroupedDataset,
    v: SubsampleFractions,
    penalty: Optional[PenaltySpec] = None,
    m: Optional[int] = None,
) -> np.ndarray:
    """d2h / dtheta dv_g with m = sum_g ceil(v_g n_g) held fixed.

    Row g is the theta-gradient of (1/m) sum_{i in g} loss_i.

    Raises:
        core.EmptyGroup: A group has no training observations.
        core.SizeError: m = 0.
    """
    _require_groups(train)
    m = subg_sample_size(train, v) if m is None else m
    if m < 1:
        raise core.SizeError("the subsample would be empty (m = 0)")
    return group_gradient_sums(theta_hat, train) / m


def ift_solve(hessian: np.ndarray, cross: np.ndarray, damping: float) -> IFTSolution:
    """-cross (hessian + damping I)^{-1} by a Cholesky factorization.

    Raises:
        core.DomainError: Negative damping.
        core.IllConditioned: The damped Hessian is not positive definite or
            its condition estimate exceeds config.MAX_CONDITION.
    """
    if damping < 0:
        raise core.DomainError(f"damping must be >= 0, got {damping}")
    H = np.asarray(hessian, dtype=float)
    C = np.atleast_2d(np.asarray(cross, dtype=float))
    dim = H.shape[0]
    if H.shape != (dim, dim) or C.shape[1] != dim:
        raise core.SizeError(f"hessian {H.shape} and cross {C.shape} do not match")
    if not np.allclose(H, H.T, rtol=1e-10, atol=1e-12):
        raise core.DomainError("hessian must be symmetric")

    damped = H + damping * np.eye(dim)
    eigenvalues = scipy.linalg.eigvalsh(damped)
    smallest, largest = eigenvalues[0], eigenvalues[-1]
    condition = np.inf if smallest <= 0 else largest / smallest
    if not condition <= config.MAX_CONDITION:
        raise core.IllConditioned(
            f"damped Hessian condition estimate {condition:.3g} exceeds "
            f"{config.MAX_CONDITION:.0e} (damping {damping:g})"
        )
    factor = scipy.linalg.cho_factor(damped)
    solution = scipy.linalg.cho_solve(factor, C.T)
    scale = max(float(np.linalg.norm(C)), np.finfo(float).tiny)
    residual = float(np.linalg.norm(damped @ solution - C.T)) / scale
    undamped = float(np.max(np.abs(scipy.linalg.eigvalsh(H))))
    suppressed = damping > SUPPRESSION_RATIO * max(undamped, np.finfo(float).tiny)
    if suppressed:
        log.warning(f"damping {damping:g} dominates the Hessian, gradient suppressed")
    return IFTSolution(-solution.T, float(condition), residual, suppressed)


def ift_parameter_jacobian(
    hessian: np.ndarray, cross: np.ndarray, damping: float
) -> np.ndarray:
    return ift_solve(hessian, cross, damping).jacobian


def _r_weights(val: GroupedDataset, shift: ShiftSpec) -> np.ndarray:
    return likelihood_ratios(shift).r[val.groups - 1]


def _check_stationary(
    theta_hat: Theta,
    train: GroupedDataset,
    weights: np.ndarray,
    penalty: PenaltySpec,
    tolerance: float,
) -> None:
    norm = float(np.linalg.norm(logistic_gradient(theta_hat, train, weights, penalty)))
    if norm > config.STALENESS_FACTOR * tolerance:
        raise core.StalenessError(
            f"inner gradient norm {norm:.3e} exceeds "
            f"{config.STALENESS_FACTOR:g} x tolerance {tolerance:.1e}, "
            "the implicit function theorem does not apply"
        )


def _validation_gradient(
    theta: Theta, val: GroupedDataset, val_weights: np.ndarray
) -> tuple[np.ndarray, float]:
    none = PenaltySpec.none()
    return (
        logistic_gradient(theta, val, val_weights, none),
        weighted_logistic_loss(theta, val, val_weights, none),
    )


def _require_differentiable(penalty: PenaltySpec) -> None:
    if not penalty.differentiable:
        raise core.NotDifferentiable(
            "hypergradients need a twice differentiable penalty, "
            "use ridge or smoothed-l1"
        )


def hypergradient_p(
    theta_hat: Theta,
    p: SimplexWeights,
    train: GroupedDataset,
    val: GroupedDataset,
    shift: ShiftSpec,
    penalty: PenaltySpec,
    damping: float = config.IFT_DAMPING,
    tolerance: float = config.GRADIENT_TOLERANCE,
    val_weights: Optional[np.ndarray] = None,
) -> HypergradReport:
    """Gradient of the weighted validation loss in the group weights p.

    Args:
        theta_hat (Theta): Minimizer of the p-weighted training loss.
        p (SimplexWeights): Group weights `theta_hat` was fitted with.
        train (GroupedDataset)
        val (GroupedDataset)
        shift (ShiftSpec): p_train defines the observation weights.
        penalty (PenaltySpec)
        damping (float, optional): Added to the Hessian diagonal.
        tolerance (float, optional): Solver tolerance of `theta_hat`.
        val_weights (np.ndarray, optional): Validation observation weights.
            Defaults to the likelihood ratios r of `shift`.

    Raises:
        core.StalenessError: `theta_hat` is not stationary.
        core.IllConditioned
        core.NotDifferentiable: Exact L1 penalty.

    Returns:
        HypergradReport: Zero-sum tangent gradient over all G groups.
    """
    _require_differentiable(penalty)
    w = per_observation_weights(p, shift, train.groups)
    _check_stationary(theta_hat, train, w, penalty, tolerance)
    hessian = logistic_hessian(theta_hat, train, w, penalty)
    cross = cross_derivative_p(theta_hat, train, shift, penalty)
    solution = ift_solve(hessian, cross, damping)

    if val_weights is None:
        val_weights = _r_weights(val, shift)
    val_gradient, val_loss = _validation_gradient(theta_hat, val, val_weights)
    free = solution.jacobian @ val_gradient
    # The pivot group has no free coordinate; projecting onto sum = 0 gives
    # the tangent vector of the simplex.
    full = np.append(free, 0.0)
    tangent = full - full.mean()
    return HypergradReport(
        gradient=tangent,
        hessian_condition_estimate=solution.condition_estimate,
        solve_residual=solution.residual,
        damping_used=damping,
        validation_loss=val_loss,
        update_mask=np.ones(train.G, dtype=bool),
        suppressed=solution.suppressed,
        pivot_gradient=free,
    )


def _fraction_mask(n_groups: int, pinned_group: Optional[int]) -> np.ndarray:
    mask = np.ones(n_groups, dtype=bool)
    if pinned_group is not None:
        mask[pinned_group - 1] = False
    return mask


def hypergradient_v(
    theta_hat: Theta,
    v: SubsampleFractions,
    train: GroupedDataset,
    val: GroupedDataset,
    shift: ShiftSpec,
    penalty: PenaltySpec,
    damping: float = config.IFT_DAMPING,
    tolerance: float = config.GRADIENT_TOLERANCE,
    pinned_group: Optional[int] = None,
    val_weights: Optional[np.ndarray] = None,
) -> HypergradReport:
    """Gradient of the weighted validation loss in the subsample fractions v.

    No simplex projection: every coordinate is free except `pinned_group`,
    whose entry is reported but masked.
    """
    _require_differentiable(penalty)
    m = subg_sample_size(train, v)
    w = subg_observation_weights(train, v, m)
    _check_stationary(theta_hat, train, w, penalty, tolerance)
    hessian = logistic_hessian(theta_hat, train, w, penalty)
    cross = cross_derivative_v(theta_hat, train, v, penalty, m)
    solution = ift_solve(hessian, cross, damping)

    if val_weights is None:
        val_weights = _r_weights(val, shift)
    val_gradient, val_loss = _validation_gradient(theta_hat, val, val_weights)
    return HypergradReport(
        gradient=solution.jacobian @ val_gradient,
        hessian_condition_estimate=solution.condition_estimate,
        solve_residual=solution.residual,
        damping_used=damping,
        validation_loss=val_loss,
        update_mask=_fraction_mask(train.G, pinned_group),
        suppressed=solution.suppressed,
    )


def ensemble_hypergradient_v(
    member_thetas: Sequence[Theta],
    theta_bar: Theta,
    v: SubsampleFractions,
    train: GroupedDataset,
    val: GroupedDataset,
    shift: ShiftSpec,
    penalty: PenaltySpec,
    damping: float = config.IFT_DAMPING,
    pinned_group: Optional[int] = None,
    val_weights: Optional[np.ndarray] = None,
    member_data: Optional[Sequence[GroupedDataset]] = None,
    tolerance: float = config.GRADIENT_TOLERANCE,
) -> HypergradReport:
    """Mean of the per-member SUBG hypergradients of an averaged ensemble.

    Member k contributes grad L_val(theta_bar) . d theta_k / d v. Member k
    minimizes the unweighted loss of its own subsample, which has no
    derivative in v; its Jacobian is approximated by the one of the relaxed
    SUBG objective on the full training half, evaluated at theta_k.

    Args:
        member_data (Sequence[GroupedDataset], optional): Subsample of each
            member. If given, every theta_k must be stationary on its
            subsample (unit weights) within `tolerance`.

    Raises:
        core.SizeError: No members, or `member_data` of another length.
        core.StalenessError: A member is not stationary on its subsample.
    """
    _require_differentiable(penalty)
    if not member_thetas:
        raise core.SizeError("ensemble needs at least one member")
    if member_data is not None:
        if len(member_data) != len(member_thetas):
            raise core.SizeError(
                f"{len(member_data)} subsamples for {len(member_thetas)} members"
            )
        for theta_k, subsample in zip(member_thetas, member_data):
            _check_stationary(
                theta_k, subsample, np.ones(subsample.n), penalty, tolerance
            )
    m = subg_sample_size(train, v)
    w = subg_observation_weights(train, v, m)
    if val_weights is None:
        val_weights = _r_weights(val, shift)
    val_gradient, val_loss = _validation_gradient(theta_bar, val, val_weights)

    gradients = []
    conditions = []
    residuals = []
    suppressed = False
    for theta_k in member_thetas:
        hessian = logistic_hessian(theta_k, train, w, penalty)
        cross = cross_derivative_v(theta_k, train, v, penalty, m)
        solution = ift_solve(hessian, cross, damping)
        gradients.append(solution.jacobian @ val_gradient)
        conditions.append(solution.condition_estimate)
        residuals.append(solution.residual)
        suppressed = suppressed or solution.suppressed
    member_gradients = np.vstack(gradients)
    return HypergradReport(
        gradient=member_gradients.mean(axis=0),
        hessian_condition_estimate=max(conditions),
        solve_residual=max(residuals),
        damping_used=damping,
        validation_loss=val_loss,
        update_mask=_fraction_mask(train.G, pinned_group),
        suppressed=suppressed,
        member_gradients=member_gradients,
    )


def finite_difference_hypergradient(
    weights: np.ndarray,
    step: float,
    objective: Callable[[np.ndarray], float],
    directions: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central differences of `objective` along each direction.

    `objective` has to refit the inner problem for every call. Directions
    default to the unit vectors; use e_g - e_G to differentiate along the
    simplex.
    """
    if not step > 0:
        raise core.DomainError(f"step must be > 0, got {step}")
    weights = np.asarray(weights, dtype=float)
    if directions is None:
        directions = np.eye(len(weights))
    return np.array(
        [
            (objective(weights + step * e) - objective(weights - step * e)) / (2 * step)
            for e in np.atleast_2d(directions)
        ]
    )
