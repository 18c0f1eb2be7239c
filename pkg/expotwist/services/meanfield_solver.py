"""Nonlinear entropic problem inf_Q F(E_Q[phi]) + H(Q|P).

The optimum is the exponential twist for the linear cost c * phi with the
scalar multiplier c = F'(E_Q*_c[phi]); the solver iterates that relation with
damping on one fixed set of reference paths.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from expotwist.core.errors import DegenerateEnsembleError, InvariantViolationError, NonConvergenceError
from expotwist.core.rng import SeedSpec
from expotwist.schemas.model import CostSpec, ModelSpec, TimeGrid
from expotwist.schemas.reports import MeanFieldResult, MeanFieldStep
from expotwist.services.feynman_kac import RunningCost
from expotwist.services.girsanov import (
    WeightedEnsemble,
    entropy_estimate,
    normalize_weights,
    path_costs,
    variational_report,
    weighted_expectation,
)
from expotwist.services.path_sampler import sample_paths

logger = logging.getLogger(__name__)

Array = np.ndarray


@dataclass(frozen=True)
class MeanFieldProblem:
    """Convex F with derivative F', cost phi and the iteration parameters."""
    F: Callable[[float], float]
    F_prime: Callable[[float], float]
    cost: CostSpec
    theta: float = 0.5
    tol: float = 1e-3
    max_iter: int = 30
    name: str = "meanfield"

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"damping theta must lie in (0, 1], got {self.theta}")
        if self.tol <= 0.0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


def linear_objective(cost: CostSpec, slope: float = 1.0, **kwargs) -> MeanFieldProblem:
    """F(m) = slope * m."""
    return MeanFieldProblem(F=lambda m: slope * m, F_prime=lambda m: slope, cost=cost,
                            name=f"linear({slope:g})", **kwargs)


def quadratic_objective(cost: CostSpec, curvature: float = 1.0, **kwargs) -> MeanFieldProblem:
    """F(m) = curvature / 2 * m^2."""
    return MeanFieldProblem(F=lambda m: 0.5 * curvature * m * m, F_prime=lambda m: curvature * m, cost=cost,
                            name=f"quadratic({curvature:g})", **kwargs)


@dataclass(frozen=True)
class ReferenceCosts:
    """phi_i of the retained reference paths, shared by every multiplier."""
    phi: Array
    n_excluded: int = 0


def reference_costs(model: ModelSpec, cost: CostSpec, grid: TimeGrid, n_paths: int, seed: SeedSpec) -> ReferenceCosts:
    acc = RunningCost(cost, n_paths, grid)
    bundle = sample_paths(model, grid, n_paths, seed, observer=acc, record=False)
    phi, retained = path_costs(bundle, cost, running=acc.total)
    if not np.any(retained):
        raise DegenerateEnsembleError(f"no retained reference path out of {n_paths}")
    return ReferenceCosts(phi=phi[retained], n_excluded=n_paths - int(np.count_nonzero(retained)))


def _twist_at(reference: ReferenceCosts, c: float) -> Tuple[WeightedEnsemble, float, float]:
    try:
        ensemble = normalize_weights(c * reference.phi, n_excluded=reference.n_excluded)
    except DegenerateEnsembleError as exc:
        raise DegenerateEnsembleError(f"multiplier c={c!r}: {exc}") from exc
    m, se = weighted_expectation(ensemble, reference.phi)
    return ensemble, m, se


def linearized_twist(problem: MeanFieldProblem, c: float, model: ModelSpec, grid: TimeGrid, n_paths: int,
                     seed: SeedSpec, reference: Optional[ReferenceCosts] = None) -> Tuple[WeightedEnsemble, float, float]:
    """Twist with cost c * phi; returns the ensemble and m = E_Q*_c[phi] with its standard error."""
    if not c >= 0.0:
        raise ValueError(f"multiplier c must be >= 0 (c * phi must stay bounded below), got {c}")
    if reference is None:
        reference = reference_costs(model, problem.cost, grid, n_paths, seed)
    return _twist_at(reference, c)


def _derivative(problem: MeanFieldProblem, m: float) -> float:
    value = float(problem.F_prime(m))
    if not math.isfinite(value):
        raise InvariantViolationError(f"F'({m!r}) = {value!r} is not finite ({problem.name})")
    return value


def fixed_point_solve(problem: MeanFieldProblem, model: ModelSpec, grid: TimeGrid, n_paths: int,
                      seed: SeedSpec) -> MeanFieldResult:
    """Damped iteration c <- (1 - theta) c + theta F'(m(c)) under common random numbers.

    Starts from c_0 = F'(E_P[phi]). Raises NonConvergenceError carrying the
    trace when max_iter is reached.
    """
    reference = reference_costs(model, problem.cost, grid, n_paths, seed)
    trace: List[MeanFieldStep] = []

    mean_p = math.fsum(reference.phi) / reference.phi.size
    c = _derivative(problem, mean_p)
    logger.info(f"Mean-field {problem.name}: E_P[phi]={mean_p:.6g}, c_0={c:.6g}, theta={problem.theta}")

    for k in range(1, problem.max_iter + 1):
        if c < 0.0:
            raise InvariantViolationError(
                f"iteration {k} of {problem.name} produced a negative multiplier c={c!r}; F' must be >= 0 here")
        ensemble, m, se = _twist_at(reference, c)
        entropy = entropy_estimate(ensemble)
        trace.append(MeanFieldStep(iter=k, c=c, m=m, objective=float(problem.F(m)) + entropy,
                                   entropy=entropy, m_stderr=se))
        c_next = (1.0 - problem.theta) * c + problem.theta * _derivative(problem, m)
        logger.debug(f"Mean-field iteration {k}: c={c:.8g}, m={m:.8g} +/- {se:.3g}, next c={c_next:.8g}")

        if abs(c_next - c) < problem.tol:
            ensemble, m_star, m_se = _twist_at(reference, c_next)
            # twist identity at the returned multiplier
            variational_report(ensemble)
            logger.info(f"Mean-field {problem.name} converged in {k} iteration(s): c*={c_next:.6g}, "
                        f"m*={m_star:.6g} +/- {m_se:.3g}")
            return MeanFieldResult(c_star=c_next, m_star=m_star, m_stderr=m_se, iterations=k,
                                   converged=True, trace=trace)
        c = c_next

    logger.error(f"Mean-field {problem.name}: no convergence in {problem.max_iter} iterations (last c={c:.6g})")
    raise NonConvergenceError(
        f"fixed point of {problem.name} did not converge in {problem.max_iter} iterations "
        f"(last |c_k+1 - c_k| = {abs(c - trace[-1].c):.3g})",
        trace=trace)
