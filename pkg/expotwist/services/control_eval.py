"""Path-integral control: optimal feedback, cost functional and policy ranking.

For diffusions the twist is the law of the controlled SDE with drift
b + sigma u*, where sigma u* = Gamma(v)/v, and J(u*) = -log Z.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from expotwist.config import settings
from expotwist.core.errors import UnsupportedModelError
from expotwist.core.rng import SeedSpec
from expotwist.schemas.functions import ControlPolicy
from expotwist.schemas.model import CostSpec, ModelSpec, TimeGrid
from expotwist.schemas.reports import RankingReport, RankingRow
from expotwist.services.model_core import as_batch
from expotwist.services.path_sampler import sample_paths
from expotwist.services.twist_engine import TwistedModel, gamma_batch, simulate_twisted

logger = logging.getLogger(__name__)

Array = np.ndarray


def _require_diffusion(model: ModelSpec):
    if model.jump is not None:
        raise UnsupportedModelError(
            f"control evaluation is defined for diffusions only, model '{model.family}' has jumps")


def _feedback(twisted: TwistedModel, t: float, X: Array) -> Array:
    """u* on a batch: solve sigma u = Gamma(v)/v row by row."""
    model = twisted.base
    _require_diffusion(model)
    X = as_batch(X)
    S = np.asarray(model.diffusion(t, X), dtype=float)
    v = twisted.v(t, X)[:, None]
    rhs = gamma_batch(twisted.value, model, t, X, twisted.fd_step) / v

    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(S)
    singular = ~np.isfinite(cond) | (cond > settings.condition_limit)
    U = np.zeros_like(X, dtype=float)
    regular = ~singular
    if np.any(regular):
        # pivoted LU, sigma need not be symmetric
        U[regular] = np.linalg.solve(S[regular], rhs[regular][..., None])[..., 0]
    if np.any(singular):
        if not twisted.value.has_analytic_gradient:
            bad = int(np.flatnonzero(singular)[0])
            raise UnsupportedModelError(
                f"sigma is singular (cond {cond[bad]:.3g}) at t={t}, x={X[bad].tolist()} "
                f"and the value source has no analytic gradient")
        grad = twisted.value.gradient(t, X[singular])
        U[singular] = np.einsum("nji,nj->ni", S[singular], grad) / v[singular]
    return U


def optimal_control(twisted: TwistedModel, t: float, x):
    """u*(t, x) with sigma u* = Gamma(v)/v, i.e. sigma^T grad log v when sigma is invertible."""
    out = _feedback(twisted, t, as_batch(x))
    return out[0] if np.ndim(x) <= 1 else out


def optimal_policy(twisted: TwistedModel, name: str = "u*") -> ControlPolicy:
    _require_diffusion(twisted.base)
    provenance = "analytic" if twisted.value.has_analytic_gradient else "from-value-surface"
    return ControlPolicy(name=name, feedback=lambda t, X: _feedback(twisted, t, X), provenance=provenance)


class _ControlCost:
    """Observer accumulating sum_k (f + |u|^2 / 2) dt."""

    def __init__(self, cost: CostSpec, policy: ControlPolicy, grid: TimeGrid, n_paths: int):
        self.cost = cost
        self.policy = policy
        self.grid = grid
        self.total = np.zeros(n_paths)

    def __call__(self, k: int, t: float, X: Array, rows: slice):
        if k >= self.grid.n_steps:
            return
        u = self.policy.feedback(t, np.nan_to_num(X))
        step = 0.5 * np.sum(u * u, axis=1)
        if not self.cost.is_zero:
            step = step + self.cost.running(t, X)
        self.total[rows] += step * self.grid.dt


def _evaluate(model: ModelSpec, cost: CostSpec, policy: ControlPolicy, grid: TimeGrid,
              n_paths: int, seed: SeedSpec) -> Tuple[float, float, int]:
    _require_diffusion(model)

    def controlled_drift(t, X):
        u = policy.feedback(t, X)
        return model.drift(t, X) + np.einsum("nij,nj->ni", model.diffusion(t, X), u)

    acc = _ControlCost(cost, policy, grid, n_paths)
    bundle = sample_paths(model, grid, n_paths, seed, drift_override=controlled_drift, observer=acc, record=False)
    with np.errstate(invalid="ignore", over="ignore"):
        J = acc.total + cost.terminal(bundle.terminal)
    keep = ~bundle.diverged & np.isfinite(J)
    excluded = n_paths - int(np.count_nonzero(keep))
    if excluded:
        logger.warning(f"Policy '{policy.name}': excluded {excluded} of {n_paths} path(s)")
    if not np.any(keep):
        raise UnsupportedModelError(f"policy '{policy.name}' produced no finite path")
    J = J[keep]
    stderr = float(np.std(J, ddof=1) / math.sqrt(J.size)) if J.size > 1 else 0.0
    return math.fsum(J) / J.size, stderr, excluded


def cost_functional(model: ModelSpec, cost: CostSpec, policy: ControlPolicy, grid: TimeGrid,
                    n_paths: int, seed: SeedSpec) -> Tuple[float, float]:
    """J(u) = E[sum (f + |u|^2/2) dt + g(X_T)] under drift b + sigma u."""
    J, stderr, _ = _evaluate(model, cost, policy, grid, n_paths, seed)
    return J, stderr


def compare_controls(model: ModelSpec, cost: CostSpec, policies: Sequence[ControlPolicy], grid: TimeGrid,
                     n_paths: int, seed: SeedSpec, reference: Optional[str] = None,
                     minus_log_z: Optional[float] = None) -> RankingReport:
    """Rank policies by J under common random numbers; flag any that beats the optimal one."""
    if not policies:
        raise ValueError("compare_controls needs at least one policy")
    if reference is None:
        reference = next((p.name for p in policies if p.provenance != "user-supplied"), None)

    rows: List[RankingRow] = []
    for policy in policies:
        J, stderr, excluded = _evaluate(model, cost, policy, grid, n_paths, seed)
        gap = None if minus_log_z is None else J - minus_log_z
        rows.append(RankingRow(policy_name=policy.name, J=J, stderr=stderr, gap_to_minus_logZ=gap, excluded=excluded))
        logger.info(f"Policy '{policy.name}' ({policy.provenance}): J={J:.6g} +/- {stderr:.3g}")
    rows.sort(key=lambda r: r.J)

    report = RankingReport(rows=rows, reference=reference)
    if reference is not None:
        ref = report.by_name(reference)
        for row in rows:
            if row.policy_name == reference:
                continue
            combined = math.hypot(row.stderr, ref.stderr)
            if row.J < ref.J - 3.0 * combined:
                message = (f"policy '{row.policy_name}' beats optimal '{reference}' by "
                           f"{ref.J - row.J:.4g} (> 3 x {combined:.3g})")
                logger.warning(message)
                report.red_flags.append(message)
    return report


def entropy_from_control(twisted: TwistedModel, grid: TimeGrid, n_paths: int, seed: SeedSpec) -> Tuple[float, float]:
    """H(Q*|P) = E_Q*[int |u*|^2 / 2 dt] for diffusions started from a point."""
    _require_diffusion(twisted.base)
    if not twisted.base.initial_law.is_point_mass:
        raise UnsupportedModelError("entropy from the control needs a point-mass initial law")

    policy = optimal_policy(twisted)
    total = np.zeros(n_paths)

    def observer(k, t, X, rows):
        if k < grid.n_steps:
            u = policy.feedback(t, np.nan_to_num(X))
            total[rows] += 0.5 * np.sum(u * u, axis=1) * grid.dt

    bundle = simulate_twisted(twisted, grid, n_paths, seed, observer=observer, record=False)
    values = total[~bundle.diverged]
    stderr = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return math.fsum(values) / values.size, stderr
