"""The twisted model Q*.

Under Q* the drift becomes b + Gamma(v)/v with Gamma(v) = sigma sigma^T grad v,
the jump kernel becomes (v(t, x + q) / v(t, x)) L(t, x, dq) and the initial law
becomes nu(dx) proportional to v(0, x) mu(dx).
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path as FilePath
from typing import Optional, Sequence

import numpy as np

from expotwist.config import settings
from expotwist.core.errors import DegenerateTwistError, InvariantViolationError, NumericalFailureError
from expotwist.core.rng import SeedSpec
from expotwist.core.utils import format_float
from expotwist.schemas.model import ModelSpec, TimeGrid
from expotwist.schemas.value import ValueSource
from expotwist.services.model_core import as_batch, require_before_horizon
from expotwist.services.path_sampler import PathBundle, sample_paths

logger = logging.getLogger(__name__)

Array = np.ndarray
# v may exceed 1 by rounding only
_ACCEPTANCE_SLACK = 1e-12


def gamma_batch(value: ValueSource, model: ModelSpec, t: float, X: Array, fd_step: Optional[float]) -> Array:
    grad = np.asarray(value.gradient(t, X, fd_step), dtype=float)
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(grad), axis=1))[0])
        raise NumericalFailureError(f"non-finite grad v at t={t}, x={X[bad].tolist()}",
                                    stencil={"t": t, "x": X[bad].tolist(), "grad": grad[bad].tolist()})
    return np.einsum("nij,nj->ni", model.diffusion_matrix(t, X), grad)


def generalized_gradient(value: ValueSource, model: ModelSpec, t: float, x, fd_step: Optional[float] = None,
                         horizon: Optional[float] = None):
    """Gamma(v)(t, x) = sigma sigma^T grad_x v.

    The horizon defaults to the one carried by the value source, if any.
    """
    require_before_horizon(t, horizon if horizon is not None else getattr(value, "horizon", None))
    out = gamma_batch(value, model, t, as_batch(x), fd_step)
    return out[0] if np.ndim(x) <= 1 else out


@dataclass(frozen=True)
class TwistedModel:
    base: ModelSpec
    value: ValueSource
    eps_v: float = settings.eps_v
    fd_step: Optional[float] = None

    @property
    def dim(self) -> int:
        return self.base.dim

    def v(self, t: float, X: Array) -> Array:
        return np.maximum(self.value.value(t, X), self.eps_v)

    def drift(self, t: float, X: Array) -> Array:
        """b + Gamma(v)/v on a batch, shape (n, d)."""
        X = as_batch(X)
        gamma = gamma_batch(self.value, self.base, t, X, self.fd_step)
        return self.base.drift(t, X) + gamma / self.v(t, X)[:, None]

    def acceptance(self, t: float, x: Array, q: Array) -> float:
        """Probability v(t, x + q) of keeping a proposed jump q."""
        p = float(self.value.value(t, (np.asarray(x) + np.asarray(q))[None, :])[0])
        if not 0.0 <= p <= 1.0 + _ACCEPTANCE_SLACK:
            raise InvariantViolationError(
                f"jump acceptance v(t, x + q) = {p!r} outside [0, 1] at t={t}, x={np.asarray(x).tolist()}, "
                f"q={np.asarray(q).tolist()} (corrupted value surface?)")
        return min(p, 1.0)

    def envelope(self, t: float, X: Array) -> Array:
        """Proposal rate lambda(t, x) / v(t, x)."""
        return self.base.jump.intensity(t, X) / self.v(t, X)


def build_twisted_model(model: ModelSpec, value: ValueSource, eps_v: Optional[float] = None,
                        fd_step: Optional[float] = None) -> TwistedModel:
    return TwistedModel(base=model, value=value, eps_v=settings.eps_v if eps_v is None else eps_v,
                        fd_step=fd_step)


def twisted_drift(twisted: TwistedModel, t: float, x):
    out = twisted.drift(t, as_batch(x))
    return out[0] if np.ndim(x) <= 1 else out


def twisted_jump_proposal(twisted: TwistedModel, t: float, x, rng: np.random.Generator) -> Optional[Array]:
    """One proposal of the thinned twisted kernel: a jump size, or None when rejected."""
    if twisted.base.jump is None:
        raise ValueError("twisted_jump_proposal needs a model with jumps")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    q = np.asarray(twisted.base.jump.sampler(t, x[None, :], rng), dtype=float).reshape(x.shape)
    p = twisted.acceptance(t, x, q)
    if p < 1.0 and rng.random() >= p:
        return None
    return q


def sample_initial_twisted(twisted: TwistedModel, rng: np.random.Generator, start: float = 0.0) -> Array:
    """Rejection sampling of nu: x ~ mu kept with probability v(start, x)."""
    law = twisted.base.initial_law
    if law.is_point_mass:
        return np.array(law.point, dtype=float)

    limit = settings.max_initial_proposals
    for _ in range(limit):
        x = law.draw(rng)
        p = float(twisted.value.value(start, x[None, :])[0])
        if not 0.0 <= p <= 1.0 + _ACCEPTANCE_SLACK:
            raise InvariantViolationError(f"initial acceptance v({start}, x) = {p!r} outside [0, 1] at x={x.tolist()}")
        if p >= 1.0 or rng.random() < p:
            return x
    raise DegenerateTwistError(
        f"no twisted initial state accepted in {limit} proposals "
        f"(acceptance rate below {settings.min_initial_acceptance:g})")


def simulate_twisted(twisted: TwistedModel, grid: TimeGrid, n_paths: int, seed: SeedSpec, **kwargs) -> PathBundle:
    """Paths under Q*, on the same seed contract as the reference sampler."""
    model = twisted.base
    jump_rule = twisted if model.jump is not None else None
    logger.debug(f"Simulating {n_paths} twisted paths ({model.family})")
    return sample_paths(model, grid, n_paths, seed, drift_override=twisted.drift, jump_rule=jump_rule,
                        initial_sampler=lambda rng: sample_initial_twisted(twisted, rng, grid.start), **kwargs)


def dump_twisted_drift(twisted: TwistedModel, times: Sequence[float], points, path: FilePath) -> FilePath:
    """CSV t,x_1..x_d,bstar_1..bstar_d over ``times`` x ``points``."""
    path = FilePath(path)
    X = as_batch(points)
    d = twisted.dim
    header = ["t"] + [f"x_{i + 1}" for i in range(d)] + [f"bstar_{i + 1}" for i in range(d)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for t in times:
            B = twisted.drift(float(t), X)
            for x, b in zip(X, B):
                writer.writerow([format_float(t)] + [format_float(c) for c in x] + [format_float(c) for c in b])
    return path
