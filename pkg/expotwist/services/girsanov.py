"""Girsanov reweighting of reference paths into Q*-expectations.

D_i = exp(-phi_i) / mean_j exp(-phi_j), computed in log space. All path
reductions use compensated summation (math.fsum).
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, xlogy

from expotwist.core.errors import DegenerateEnsembleError, InternalConsistencyError
from expotwist.schemas.model import CostSpec, TimeGrid
from expotwist.schemas.reports import EntropyReport
from expotwist.services.path_sampler import Path, PathBundle

logger = logging.getLogger(__name__)

Array = np.ndarray
GAP_TOLERANCE = 1e-10


@dataclass(frozen=True)
class WeightedEnsemble:
    costs: Array                      # phi_i of retained paths
    weights: Array                    # D_i, mean one
    log_z: float                      # log Z_hat
    retained: Optional[Array] = None  # mask into the source bundle
    n_excluded: int = 0

    @property
    def n_paths(self) -> int:
        return self.weights.size

    @property
    def z_hat(self) -> float:
        return math.exp(self.log_z)

    @property
    def minus_log_z(self) -> float:
        return -self.log_z

    def align(self, h) -> Array:
        """Restrict a per-path statistic of the whole bundle to the retained paths."""
        h = np.asarray(h, dtype=float)
        if h.ndim == 0:
            return np.full(self.n_paths, float(h))
        if self.retained is not None and h.shape[0] == self.retained.size and h.shape[0] != self.n_paths:
            return h[self.retained]
        if h.shape[0] != self.n_paths:
            raise ValueError(f"statistic has {h.shape[0]} entries, ensemble has {self.n_paths} paths")
        return h


# --- COSTS ---

def path_cost(path: Path, cost: CostSpec, grid: TimeGrid) -> float:
    """phi = sum_k f(t_k, X_k) dt + g(X_T), left-endpoint rule. Non-finite values pass through."""
    if path.states.shape[0] != grid.n_steps + 1:
        raise ValueError(f"path has {path.states.shape[0]} states, grid has {grid.n_steps + 1} nodes")
    with np.errstate(invalid="ignore", over="ignore"):
        terms = [float(cost.running(float(t), path.states[k][None, :])[0]) * grid.dt
                 for k, t in enumerate(grid.times[:-1])]
        terminal = float(cost.terminal(path.states[-1][None, :])[0])
    return math.fsum(terms) + terminal


def running_costs(bundle: PathBundle, cost: CostSpec) -> Array:
    """Left-endpoint sum of f along every recorded path, same summation order as the simulation observers."""
    if bundle.states is None:
        raise ValueError("running costs need a bundle simulated with record=True")
    grid = bundle.grid
    total = np.zeros(bundle.n_paths)
    if cost.is_zero:
        return total
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(grid.n_steps):
            total += cost.running(float(grid.times[k]), bundle.states[:, k, :]) * grid.dt
    return total


def path_costs(bundle: PathBundle, cost: CostSpec, running: Optional[Array] = None) -> Tuple[Array, Array]:
    """phi for every path of the bundle plus the mask of retained (finite, not diverged) paths."""
    if running is None:
        running = running_costs(bundle, cost)
    with np.errstate(invalid="ignore", over="ignore"):
        phi = running + cost.terminal(bundle.terminal)
    retained = ~bundle.diverged & np.isfinite(phi)
    excluded = bundle.n_paths - int(np.count_nonzero(retained))
    if excluded:
        logger.warning(f"Excluded {excluded} of {bundle.n_paths} path(s) with diverged state or non-finite cost")
    return phi, retained


# --- WEIGHTS ---

def normalize_weights(costs: Sequence[float], retained: Optional[Array] = None, n_excluded: int = 0) -> WeightedEnsemble:
    costs = np.asarray(costs, dtype=float)
    if costs.size == 0:
        raise ValueError("normalize_weights needs at least one cost")
    if not np.all(np.isfinite(costs)):
        raise ValueError("costs must be finite (exclude non-finite paths first)")

    log_w = -costs
    log_z = float(logsumexp(log_w) - math.log(costs.size))
    if not math.isfinite(log_z):
        raise DegenerateEnsembleError(f"log normalizer is {log_z} over {costs.size} paths")
    D = np.exp(log_w - log_z)
    if not np.any(D > 0):
        raise DegenerateEnsembleError(f"all {costs.size} weights underflow to 0")
    return WeightedEnsemble(costs=costs, weights=D, log_z=log_z, retained=retained, n_excluded=n_excluded)


def reweight(bundle: PathBundle, cost: CostSpec, running: Optional[Array] = None) -> WeightedEnsemble:
    """path_costs + normalize_weights over the retained paths of a bundle."""
    phi, retained = path_costs(bundle, cost, running)
    if not np.any(retained):
        raise DegenerateEnsembleError(f"no retained path out of {bundle.n_paths}")
    return normalize_weights(phi[retained], retained=retained,
                             n_excluded=bundle.n_paths - int(np.count_nonzero(retained)))


def tempered_weights(costs: Sequence[float], beta: float) -> Array:
    """Mean-one weights proportional to exp(-beta * phi)."""
    costs = np.asarray(costs, dtype=float)
    log_w = -beta * costs
    return np.exp(log_w - (logsumexp(log_w) - math.log(costs.size)))


def effective_sample_size(ensemble: WeightedEnsemble) -> float:
    """(sum D)^2 / sum D^2, in [1, N]."""
    D = ensemble.weights
    return math.fsum(D) ** 2 / math.fsum(D * D)


def weighted_expectation(ensemble: WeightedEnsemble, h) -> Tuple[float, float]:
    """Self-normalized E_Q*[h] with its delta-method standard error."""
    h = ensemble.align(h)
    D = ensemble.weights
    total = math.fsum(D)
    estimate = math.fsum(D * h) / total
    stderr = math.sqrt(math.fsum((D * (h - estimate)) ** 2)) / total
    return estimate, stderr


def entropy_estimate(ensemble: WeightedEnsemble) -> float:
    """H(Q*|P) = mean of D log D, with 0 log 0 = 0."""
    return math.fsum(xlogy(ensemble.weights, ensemble.weights)) / ensemble.n_paths


def _entropy_stderr(ensemble: WeightedEnsemble, entropy: float) -> float:
    D = ensemble.weights
    influence = xlogy(D, D) - (entropy + 1.0) * D + 1.0
    return math.sqrt(math.fsum(influence ** 2)) / ensemble.n_paths


def variational_objective(costs: Sequence[float], weights: Sequence[float]) -> float:
    """Plug-in E_Q[phi] + H(Q|P) for a mean-one reweighting D' >= 0."""
    costs = np.asarray(costs, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if costs.shape != weights.shape:
        raise ValueError("costs and weights must have the same shape")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    n = weights.size
    if abs(math.fsum(weights) / n - 1.0) > 1e-9:
        raise ValueError("weights must have mean one")
    return math.fsum(weights * costs + xlogy(weights, weights)) / n


def variational_report(ensemble: WeightedEnsemble, costs: Optional[Sequence[float]] = None) -> EntropyReport:
    """-log Z_hat against E_Q*[phi] + H on one ensemble; the gap is pure algebra."""
    costs = ensemble.costs if costs is None else ensemble.align(costs)
    mean_phi, mean_phi_se = weighted_expectation(ensemble, costs)
    entropy = entropy_estimate(ensemble)
    minus_log_z = ensemble.minus_log_z
    gap = minus_log_z - (mean_phi + entropy)

    # absolute up to magnitude one, relative beyond
    scale = max(1.0, abs(minus_log_z), abs(mean_phi))
    if abs(gap) > GAP_TOLERANCE * scale:
        raise InternalConsistencyError(
            f"variational gap {gap:.3e} exceeds {GAP_TOLERANCE:g} "
            f"(-log Z={minus_log_z!r}, E[phi]={mean_phi!r}, H={entropy!r})")

    D = ensemble.weights
    n = ensemble.n_paths
    z_se_rel = float(np.std(D, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    report = EntropyReport(
        n_paths=n,
        z_hat=ensemble.z_hat,
        minus_log_z=minus_log_z,
        mean_phi=mean_phi,
        entropy=entropy,
        gap=gap,
        ess=effective_sample_size(ensemble),
        minus_log_z_stderr=z_se_rel,
        mean_phi_stderr=mean_phi_se,
        entropy_stderr=_entropy_stderr(ensemble, entropy),
    )
    logger.debug(f"Variational report: -log Z={minus_log_z:.6g}, E[phi]={mean_phi:.6g}, H={entropy:.6g}, "
                 f"gap={gap:.3e}, ESS={report.ess:.1f}/{n}")
    return report
