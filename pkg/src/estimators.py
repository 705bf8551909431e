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

"""Weighted estimators: WLS, penalized weighted logistic regression, the
relaxed SUBG objective and the DFR ensemble.

Logistic models add an intercept column in front of the features, so
coefficient vectors have length d + 1 and index 0 is never penalized.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Union

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import expit

import config
import core
import log_config
import misc
from dataset import GroupedDataset, ParameterVector, as_array
from weights import SubsampleFractions

log = log_config.getLogger(__name__)

Theta = Union[ParameterVector, np.ndarray]


@dataclasses.dataclass(frozen=True)
class PenaltySpec:
    kind: core.PenaltyKind = core.PenaltyKind.RIDGE
    strength: float = 0.0
    epsilon: float = config.SMOOTHING_EPSILON

    def __post_init__(self) -> None:
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", core.PenaltyKind(self.kind))
        if not (self.strength >= 0 and math.isfinite(self.strength)):
            raise core.DomainError(f"penalty strength must be >= 0: {self.strength}")
        if self.kind == core.PenaltyKind.SMOOTHED_L1 and not self.epsilon > 0:
            raise core.DomainError(f"smoothing epsilon must be > 0: {self.epsilon}")

    @classmethod
    def none(cls) -> PenaltySpec:
        return cls(core.PenaltyKind.NONE, 0.0)

    @classmethod
    def from_config(cls) -> PenaltySpec:
        return cls(config.PENALTY, config.PENALTY_STRENGTH, config.SMOOTHING_EPSILON)

    @property
    def active(self) -> bool:
        return self.kind != core.PenaltyKind.NONE and self.strength > 0

    @property
    def differentiable(self) -> bool:
        return self.kind != core.PenaltyKind.L1 or self.strength == 0

    def value(self, theta: np.ndarray) -> float:
        if not self.active:
            return 0.0
        b = theta[1:]
        if self.kind == core.PenaltyKind.RIDGE:
            return 0.5 * self.strength * float(b @ b)
        if self.kind == core.PenaltyKind.SMOOTHED_L1:
            eps = self.epsilon
            return self.strength * float(np.sum(np.sqrt(b * b + eps * eps) - eps))
        return self.strength * float(np.sum(np.abs(b)))

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(theta)
        if not self.active:
            return grad
        b = theta[1:]
        if self.kind == core.PenaltyKind.RIDGE:
            grad[1:] = self.strength * b
        elif self.kind == core.PenaltyKind.SMOOTHED_L1:
            grad[1:] = self.strength * b / np.sqrt(b * b + self.epsilon**2)
        else:
            raise core.NotDifferentiable("the exact L1 penalty has no gradient at 0")
        return grad

    def hessian_diagonal(self, theta: np.ndarray) -> np.ndarray:
        diag = np.zeros_like(theta)
        if not self.active:
            return diag
        b = theta[1:]
        if self.kind == core.PenaltyKind.RIDGE:
            diag[1:] = self.strength
        elif self.kind == core.PenaltyKind.SMOOTHED_L1:
            eps2 = self.epsilon**2
            diag[1:] = self.strength * eps2 / (b * b + eps2) ** 1.5
        else:
            raise core.NotDifferentiable("the exact L1 penalty has no Hessian")
        return diag


@dataclasses.dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = config.MAX_ITERATIONS
    gradient_tolerance: float = config.GRADIENT_TOLERANCE
    hessian_damping: float = config.HESSIAN_DAMPING

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise core.DomainError("max_iterations must be >= 1")
        if not self.gradient_tolerance > 0:
            raise core.DomainError("gradient_tolerance must be > 0")
        if not self.hessian_damping >= 0:
            raise core.DomainError("hessian_damping must be >= 0")


@dataclasses.dataclass(frozen=True)
class FitResult:
    theta: ParameterVector
    final_loss: float
    converged: bool
    iterations: int
    gradient_norm: float


#
# Weighted least squares
#


def wls_fit(
    data: GroupedDataset, weights: np.ndarray, damping: float = 0.0
) -> ParameterVector:
    """Solve (X'WX + damping I) beta = X'Wy.

    The design is used as given, an intercept must already be a column of
    `data.features`.

    Raises:
        core.DegenerateWeights: Weights negative, non-finite or all zero.
        core.SingularDesign: `damping` is 0 and X'WX is numerically singular.
    """
    w = _check_weights(weights, data.n)
    X, y = data.features, data.targets
    XtW = X.T * w
    A = XtW @ X
    b = XtW @ y
    if damping > 0:
        A = A + damping * np.eye(data.d)
    else:
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > 1 / np.finfo(float).eps:
            raise core.SingularDesign(
                f"weighted design is singular (condition estimate {cond:.3g})"
            )
    try:
        beta = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), b)
    except np.linalg.LinAlgError as e:
        raise core.SingularDesign("weighted design is not positive definite") from e
    return ParameterVector(beta)


#
# Weighted logistic regression
#


def add_intercept(features: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(features.shape[0]), features])


def _check_weights(weights: np.ndarray, n: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape != (n,):
        raise core.SizeError(f"expected {n} weights, got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise core.DegenerateWeights("weights must be finite and nonnegative")
    if not np.any(w > 0):
        raise core.DegenerateWeights("at least one weight must be positive")
    return w


def _margins(theta: Theta, data: GroupedDataset) -> np.ndarray:
    theta = as_array(theta)
    if theta.shape != (data.d + 1,):
        raise core.SizeError(
            f"logistic coefficients need length {data.d + 1}, got {theta.shape}"
        )
    return theta[0] + data.features @ theta[1:]


def logistic_pointwise_loss(theta: Theta, data: GroupedDataset) -> np.ndarray:
    """Negative log-likelihood per observation, log(1 + e^z) - y z."""
    z = _margins(theta, data)
    return np.logaddexp(0.0, z) - data.targets * z


def logistic_pointwise_residuals(theta: Theta, data: GroupedDataset) -> np.ndarray:
    """d loss_i / d z_i = sigmoid(z_i) - y_i."""
    return expit(_margins(theta, data)) - data.targets


def group_gradient_sums(theta: Theta, data: GroupedDataset) -> np.ndarray:
    """Row g: sum over group g of the per-observation loss gradients."""
    residual = logistic_pointwise_residuals(theta, data)
    X1 = add_intercept(data.features)
    sums = np.zeros((data.G, data.d + 1))
    np.add.at(sums, data.groups - 1, X1 * residual[:, None])
    return sums


def weighted_logistic_loss(
    theta: Theta,
    data: GroupedDataset,
    weights: np.ndarray,
    penalty: PenaltySpec,
) -> float:
    """(1/n) sum_i w_i loss_i + penalty(theta without intercept)."""
    w = np.asarray(weights, dtype=float)
    loss = float(w @ logistic_pointwise_loss(theta, data)) / data.n
    return loss + penalty.value(as_array(theta))


def logistic_gradient(
    theta: Theta,
    data: GroupedDataset,
    weights: np.ndarray,
    penalty: PenaltySpec,
) -> np.ndarray:
    theta = as_array(theta)
    w = np.asarray(weights, dtype=float)
    residual = logistic_pointwise_residuals(theta, data)
    wr = w * residual
    grad = np.empty(data.d + 1)
    grad[0] = wr.sum()
    grad[1:] = data.features.T @ wr
    return grad / data.n + penalty.gradient(theta)


def logistic_hessian(
    theta: Theta,
    data: GroupedDataset,
    weights: np.ndarray,
    penalty: PenaltySpec,
) -> np.ndarray:
    theta = as_array(theta)
    w = np.asarray(weights, dtype=float)
    s = expit(_margins(theta, data))
    X1 = add_intercept(data.features)
    H = (X1.T * (w * s * (1.0 - s))) @ X1 / data.n
    H[np.diag_indices_from(H)] += penalty.hessian_diagonal(theta)
    # Symmetric up to rounding of the products above.
    return 0.5 * (H + H.T)


def _newton_direction(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        return -scipy.linalg.cho_solve(scipy.linalg.cho_factor(H), g)
    except np.linalg.LinAlgError:
        return -np.linalg.lstsq(H, g, rcond=None)[0]


def _require_both_classes(data: GroupedDataset, w: np.ndarray) -> None:
    weighted_targets = data.targets[w > 0]
    if not (np.any(weighted_targets == 0) and np.any(weighted_targets == 1)):
        raise core.DegenerateWeights(
            "both classes need at least one observation with positive weight"
        )


def logistic_fit(
    data: GroupedDataset,
    weights: np.ndarray,
    penalty: PenaltySpec,
    solver: Optional[SolverConfig] = None,
    initial: Optional[Theta] = None,
    strict: bool = False,
) -> FitResult:
    """Minimize the weighted logistic loss with damped Newton steps.

    Starts at zero unless `initial` is given. Each step solves
    (H + damping I) s = -g and backtracks until the Armijo condition holds.

    Args:
        data (GroupedDataset): Targets in {0, 1}.
        weights (np.ndarray): Nonnegative observation weights.
        penalty (PenaltySpec): Exact L1 is solved with L-BFGS-B instead.
        solver (SolverConfig, optional): Defaults to SolverConfig().
        initial (Theta, optional): Warm start. Defaults to zeros.
        strict (bool, optional): Raise instead of warning when the gradient
            tolerance is not reached. Defaults to False.

    Raises:
        core.DegenerateWeights: Invalid weights or a class without weight.
        core.SeparableData: Unpenalized coefficients diverge.
        core.NotConverged: Only if `strict`.

    Returns:
        FitResult
    """
    solver = solver or SolverConfig()
    w = _check_weights(weights, data.n)
    _require_both_classes(data, w)
    if penalty.kind == core.PenaltyKind.L1 and penalty.active:
        return _l1_fit(data, w, penalty, solver)

    theta = np.zeros(data.d + 1) if initial is None else as_array(initial).copy()
    damping = solver.hessian_damping
    guard = not penalty.active

    def objective(t: np.ndarray) -> float:
        return weighted_logistic_loss(t, data, w, penalty)

    f = objective(theta)
    g = logistic_gradient(theta, data, w, penalty)
    iterations = 0
    while np.linalg.norm(g) > solver.gradient_tolerance:
        if iterations >= solver.max_iterations:
            break
        iterations += 1
        H = logistic_hessian(theta, data, w, penalty)
        H[np.diag_indices_from(H)] += damping
        step = _newton_direction(H, g)
        decrement = -float(g @ step)
        t = 1.0
        if decrement > 1e-10:
            while t > 1e-10 and objective(theta + t * step) > f - 1e-4 * t * decrement:
                t *= 0.5
        theta = theta + t * step
        if guard and np.linalg.norm(theta) > config.SEPARATION_GUARD:
            raise core.SeparableData(
                f"coefficient norm exceeded {config.SEPARATION_GUARD:g} "
                "without a penalty, the classes look linearly separable"
            )
        f = objective(theta)
        g = logistic_gradient(theta, data, w, penalty)

    gradient_norm = float(np.linalg.norm(g))
    converged = gradient_norm <= solver.gradient_tolerance
    if not converged:
        message = (
            f"Newton solver stopped after {iterations} iterations with "
            f"gradient norm {gradient_norm:.3e} > {solver.gradient_tolerance:.1e}"
        )
        if strict:
            raise core.NotConverged(message)
        log.warning(message)
    else:
        log.debug(f"Newton solver converged after {iterations} iterations.")
    return FitResult(ParameterVector(theta), f, converged, iterations, gradient_norm)


def _l1_fit(
    data: GroupedDataset, w: np.ndarray, penalty: PenaltySpec, solver: SolverConfig
) -> FitResult:
    """Exact L1 on split variables theta = (b0, b+ - b-) with b+, b- >= 0."""
    d = data.d

    def unpack(z: np.ndarray) -> np.ndarray:
        return np.concatenate([z[:1], z[1 : d + 1] - z[d + 1 :]])

    def fun(z: np.ndarray) -> tuple[float, np.ndarray]:
        theta = unpack(z)
        smooth = PenaltySpec.none()
        f = weighted_logistic_loss(theta, data, w, smooth)
        f += penalty.strength * float(np.sum(z[1:]))
        g = logistic_gradient(theta, data, w, smooth)
        lam = penalty.strength
        grad = np.concatenate([g[:1], g[1:] + lam, -g[1:] + lam])
        return f, grad

    bounds = [(None, None)] + [(0.0, None)] * (2 * d)
    res = scipy.optimize.minimize(
        fun,
        np.zeros(2 * d + 1),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={
            "maxiter": 100 * solver.max_iterations,
            "gtol": solver.gradient_tolerance,
        },
    )
    theta = unpack(res.x)
    if not res.success:
        log.warning(f"L1 fit did not converge: {res.message}")
    return FitResult(
        ParameterVector(theta),
        float(res.fun),
        bool(res.success),
        int(res.nit),
        float(np.max(np.abs(res.jac))),
    )


def predict(theta: Theta, data: GroupedDataset) -> np.ndarray:
    """Class 1 when sigmoid(z) >= 0.5, i.e. z >= 0."""
    return (_margins(theta, data) >= 0).astype(int)


def accuracy_by_group(theta: Theta, data: GroupedDataset) -> np.ndarray:
    """Per-group fraction of correct predictions, nan for empty groups."""
    correct = (predict(theta, data) == data.targets).astype(float)
    hits = np.bincount(data.groups - 1, weights=correct, minlength=data.G)
    counts = data.group_counts
    accuracy = np.full(data.G, np.nan)
    present = counts > 0
    accuracy[present] = hits[present] / counts[present]
    return accuracy


#
# SUBG relaxation and DFR ensemble
#


def subg_sample_size(data: GroupedDataset, v: SubsampleFractions) -> int:
    """m = sum_g ceil(v_g n_g)."""
    if len(v) != data.G:
        raise core.SizeError(f"{len(v)} fractions for {data.G} groups")
    # Guard against v_g n_g = k + 1e-15 rounding up to k + 1.
    return int(np.sum(np.ceil(v.v * data.group_counts - 1e-9)))


def subg_observation_weights(
    data: GroupedDataset, v: SubsampleFractions, m: Optional[int] = None
) -> np.ndarray:
    """Weights n v_g / m, so that the (1/n)-weighted loss is (1/m) sum v_g loss."""
    m = subg_sample_size(data, v) if m is None else m
    if m < 1:
        raise core.SizeError("the subsample would be empty (m = 0)")
    return data.n * v.v[data.groups - 1] / m


def subg_expected_loss(
    theta: Theta, data: GroupedDataset, v: SubsampleFractions
) -> float:
    """(1/m) sum_g sum_{i in g} v_g loss_i, the subsample average in expectation."""
    m = subg_sample_size(data, v)
    if m < 1:
        raise core.SizeError("the subsample would be empty (m = 0)")
    return float(v.v[data.groups - 1] @ logistic_pointwise_loss(theta, data)) / m


def subg_fit(
    data: GroupedDataset,
    v: SubsampleFractions,
    penalty: PenaltySpec,
    solver: Optional[SolverConfig] = None,
    initial: Optional[Theta] = None,
) -> FitResult:
    return logistic_fit(
        data, subg_observation_weights(data, v), penalty, solver, initial=initial
    )


def dfr_ensemble_members(
    data: GroupedDataset, v: SubsampleFractions, ensemble_size: int, seed: int
) -> list[np.ndarray]:
    """Sorted row indices of each member's subsample.

    Member k draws ceil(v_g n_g) rows of every group without replacement from
    its own child seed, independent of the other members.
    """
    if ensemble_size < 1:
        raise core.SizeError("ensemble_size must be >= 1")
    counts = data.group_counts
    sizes = np.ceil(v.v * counts - 1e-9).astype(int)
    empty = np.flatnonzero((v.v > 0) & (counts == 0))
    if empty.size:
        raise core.EmptyGroup(f"groups {(empty + 1).tolist()} have no observations")
    rows_by_group = [np.flatnonzero(data.groups == g) for g in range(1, data.G + 1)]
    members = []
    for child in misc.replication_seeds(seed, ensemble_size):
        rng = np.random.default_rng(child)
        chosen = [
            rng.choice(rows, size=size, replace=False)
            for rows, size in zip(rows_by_group, sizes)
            if size > 0
        ]
        members.append(np.sort(np.concatenate(chosen)))
    return members


@dataclasses.dataclass(frozen=True)
class EnsembleFit:
    theta: ParameterVector
    members: list[FitResult]
    member_indices: list[np.ndarray]

    @property
    def iterations(self) -> int:
        return sum(m.iterations for m in self.members)

    @property
    def converged(self) -> bool:
        return all(m.converged for m in self.members)


def dfr_ensemble_fit(
    data: GroupedDataset,
    v: SubsampleFractions,
    ensemble_size: int = config.ENSEMBLE_SIZE,
    penalty: Optional[PenaltySpec] = None,
    solver: Optional[SolverConfig] = None,
    seed: int = 0,
    initial: Optional[list[Theta]] = None,
) -> EnsembleFit:
    """Average coefficients of `ensemble_size` fits on group subsamples.

    The averaged ParameterVector is `theta`; the member fits are kept for
    the per-member hypergradients.
    """
    penalty = PenaltySpec.from_config() if penalty is None else penalty
    members = dfr_ensemble_members(data, v, ensemble_size, seed)
    fits = []
    for k, rows in enumerate(members):
        subsample = data.subset(rows)
        start = None if initial is None else initial[k]
        fits.append(
            logistic_fit(
                subsample, np.ones(subsample.n), penalty, solver, initial=start
            )
        )
    average = np.mean([fit.theta.theta for fit in fits], axis=0)
    return EnsembleFit(ParameterVector(average), fits, members)
