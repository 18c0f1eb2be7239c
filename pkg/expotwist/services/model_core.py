"""Reference models: probe validation and numerical evaluation of the generator.

The generator of a finite-activity jump diffusion is

    a(phi) = d_t phi + <grad phi, b> + 1/2 Tr[sigma sigma^T hess phi]
             + lambda * E_{q ~ rho}[phi(t, x + q) - phi(t, x)]

with no truncation term: ``b`` is the full drift.
"""

import logging
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from expotwist.config import settings
from expotwist.core.errors import NumericalFailureError
from expotwist.core.rng import fixed_generator
from expotwist.schemas.functions import TestFunction
from expotwist.schemas.model import CostSpec, ModelSpec, TimeGrid
from expotwist.schemas.reports import ValidationReport, Violation

logger = logging.getLogger(__name__)

Array = np.ndarray
# (t, X, X + q) -> multiplicative weight of each jump node, shape (n, m)
JumpWeight = Callable[[float, Array, Array], Array]


def as_batch(x) -> Array:
    """Coerce a state or a batch of states to shape (n, d)."""
    X = np.asarray(x, dtype=float)
    if X.ndim == 0:
        return X.reshape(1, 1)
    if X.ndim == 1:
        return X.reshape(1, -1)
    return X


def space_steps(X: Array, fd_step: Optional[float]) -> Array:
    if fd_step is None:
        return settings.fd_relative_step * (1.0 + np.linalg.norm(X, axis=1))
    if fd_step <= 0:
        raise ValueError(f"fd_step must be positive, got {fd_step}")
    return np.full(X.shape[0], float(fd_step))


def _check_finite(values: Array, what: str, t: float, X: Array, stencil: dict):
    if np.all(np.isfinite(values)):
        return
    bad = int(np.flatnonzero(~np.isfinite(values).reshape(values.shape[0], -1).all(axis=1))[0])
    detail = {k: (np.asarray(v)[bad].tolist() if np.ndim(v) else v) for k, v in stencil.items()}
    raise NumericalFailureError(f"non-finite {what} at t={t}, x={X[bad].tolist()}", stencil=detail)


# --- DERIVATIVES ---

def time_derivative(phi: TestFunction, t: float, X: Array, time_step: Optional[float] = None) -> Array:
    if phi.time_derivative is not None:
        return phi.time_derivative(t, X)
    ht = time_step if time_step is not None else settings.fd_relative_step * (1.0 + abs(t))
    fp, fm = phi(t + ht, X), phi(t - ht, X)
    out = (fp - fm) / (2.0 * ht)
    _check_finite(out, "time derivative", t, X, {"phi_plus": fp, "phi_minus": fm, "h": ht})
    return out


def gradient(phi: TestFunction, t: float, X: Array, fd_step: Optional[float] = None) -> Array:
    if phi.grad is not None:
        return phi.grad(t, X)
    h = space_steps(X, fd_step)
    G = np.empty_like(X)
    for i in range(X.shape[1]):
        Xp, Xm = X.copy(), X.copy()
        Xp[:, i] += h
        Xm[:, i] -= h
        fp, fm = phi(t, Xp), phi(t, Xm)
        G[:, i] = (fp - fm) / (2.0 * h)
        _check_finite(G[:, i], f"gradient (axis {i})", t, X, {"phi_plus": fp, "phi_minus": fm, "h": h})
    return G


def trace_term(phi: TestFunction, t: float, X: Array, A: Array, fd_step: Optional[float] = None) -> Array:
    """Tr[A hess phi] for A = sigma sigma^T, shape (n,)."""
    if phi.hess is not None:
        return np.einsum("nij,nij->n", A, phi.hess(t, X))

    n, d = X.shape
    h = space_steps(X, fd_step)
    f0 = phi(t, X)
    out = np.zeros(n)
    for i in range(d):
        if not np.any(A[:, i, i]):
            continue
        Xp, Xm = X.copy(), X.copy()
        Xp[:, i] += h
        Xm[:, i] -= h
        fp, fm = phi(t, Xp), phi(t, Xm)
        second = (fp - 2.0 * f0 + fm) / (h * h)
        _check_finite(second, f"second derivative (axis {i})", t, X,
                      {"phi_plus": fp, "phi_center": f0, "phi_minus": fm, "h": h})
        out += A[:, i, i] * second
    for i in range(d):
        for j in range(i + 1, d):
            if not np.any(A[:, i, j]) and not np.any(A[:, j, i]):
                continue
            corners = []
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                Xc = X.copy()
                Xc[:, i] += si * h
                Xc[:, j] += sj * h
                corners.append(phi(t, Xc))
            mixed = (corners[0] - corners[1] - corners[2] + corners[3]) / (4.0 * h * h)
            _check_finite(mixed, f"mixed derivative ({i},{j})", t, X, {"h": h})
            out += (A[:, i, j] + A[:, j, i]) * mixed
    return out


# --- JUMPS ---

def jump_nodes(model: ModelSpec, t: float, X: Array) -> Tuple[Array, Array]:
    """Quadrature nodes (n, m, d) and weights (n, m) of rho(t, x, .) at every row of X.

    Deterministic quadrature when the family provides one, otherwise
    ``settings.jump_mc_draws`` fixed-seed samples.
    """
    jump = model.jump
    if jump.quadrature is not None:
        nodes, weights = jump.quadrature(t, X)
        return np.asarray(nodes, dtype=float), np.asarray(weights, dtype=float)

    n, d = X.shape
    m = settings.jump_mc_draws
    rng = fixed_generator(settings.jump_mc_seed)
    Q = np.asarray(jump.sampler(t, np.repeat(X, m, axis=0), rng), dtype=float).reshape(n, m, d)
    return Q, np.full((n, m), 1.0 / m)


def jump_term(model: ModelSpec, phi: TestFunction, t: float, X: Array,
              jump_weight: Optional[JumpWeight] = None) -> Array:
    """lambda * sum_j w_j * tilt_j * (phi(x + q_j) - phi(x))."""
    n, d = X.shape
    lam = np.asarray(model.jump.intensity(t, X), dtype=float)
    nodes, weights = jump_nodes(model, t, X)
    m = nodes.shape[1]
    shifted = X[:, None, :] + nodes
    f_shift = phi(t, shifted.reshape(n * m, d)).reshape(n, m)
    f0 = phi(t, X)
    tilt = 1.0 if jump_weight is None else jump_weight(t, X, shifted)
    return lam * np.sum(weights * tilt * (f_shift - f0[:, None]), axis=1)


# --- GENERATOR ---

def apply_generator(model: ModelSpec, phi: TestFunction, t: float, X: Array,
                    fd_step: Optional[float] = None, time_step: Optional[float] = None,
                    drift: Optional[Array] = None, jump_weight: Optional[JumpWeight] = None) -> Array:
    """Vectorized generator over a batch X of shape (n, d).

    ``drift`` replaces b(t, X) (used for the twisted generator), ``jump_weight``
    reweights the jump kernel node by node.
    """
    b = model.drift(t, X) if drift is None else drift
    A = model.diffusion_matrix(t, X)
    out = time_derivative(phi, t, X, time_step)
    out = out + np.einsum("ni,ni->n", gradient(phi, t, X, fd_step), b)
    out = out + 0.5 * trace_term(phi, t, X, A, fd_step)
    if model.jump is not None:
        out = out + jump_term(model, phi, t, X, jump_weight)
    return out


def require_before_horizon(t: float, horizon: Optional[float]):
    """Generator evaluations need t < T; no check when the horizon is unknown."""
    if horizon is not None and not t < horizon:
        raise ValueError(f"t={t} must lie before the horizon T={horizon}")


def eval_generator(model: ModelSpec, phi: TestFunction, t: float, x,
                   fd_step: Optional[float] = None, time_step: Optional[float] = None,
                   horizon: Optional[float] = None):
    """a(phi)(t, x). Returns a float for a single state, an array for a batch."""
    require_before_horizon(t, horizon)
    X = as_batch(x)
    out = apply_generator(model, phi, t, X, fd_step=fd_step, time_step=time_step)
    return float(out[0]) if np.ndim(x) <= 1 else out


# --- VALIDATION ---

def _probe_checks(model: ModelSpec, cost: CostSpec, t: float, X: Array) -> Iterable[Tuple[str, str]]:
    b = np.asarray(model.drift(t, X), dtype=float)
    if not np.all(np.isfinite(b)):
        yield "drift", "drift b not finite"

    S = np.asarray(model.diffusion(t, X), dtype=float)
    if not np.all(np.isfinite(S)):
        yield "diffusion", "diffusion sigma not finite"
    else:
        A = np.einsum("nij,nkj->nik", S, S)
        eig = np.linalg.eigvalsh(A)
        if np.min(eig) < -1e-12 * max(1.0, float(np.max(np.abs(eig)))):
            yield "diffusion", "sigma sigma^T not positive semidefinite"

    f = np.asarray(cost.running(t, X), dtype=float)
    if not np.all(np.isfinite(f)):
        yield "running_cost", "f not finite"
    elif np.any(f < 0):
        yield "running_cost", "f < 0"

    g = np.asarray(cost.terminal(X), dtype=float)
    if not np.all(np.isfinite(g)):
        yield "terminal_cost", "g not finite"
    elif np.any(g < 0):
        yield "terminal_cost", "g < 0"

    if model.jump is not None:
        lam = np.asarray(model.jump.intensity(t, X), dtype=float)
        if not np.all(np.isfinite(lam)):
            yield "intensity", "intensity not finite"
        elif np.any(lam < 0):
            yield "intensity", "intensity negative"

        if model.jump.quadrature is not None:
            nodes, weights = model.jump.quadrature(t, X)
            total = float(np.sum(weights))
            if abs(total - 1.0) > 1e-9:
                yield "jump_law", f"rho does not integrate to 1 (total {total:.12g})"
            at_zero = np.all(np.asarray(nodes) == 0.0, axis=-1)
            if np.any(np.asarray(weights)[at_zero] > 0):
                yield "jump_law", "rho charges {0}"


def validate_model(model: ModelSpec, cost: CostSpec, grid: TimeGrid,
                   probes: Sequence[Tuple[float, Sequence[float]]]) -> ValidationReport:
    """Check the standing hypotheses (f, g >= 0, finite coefficients, Levy kernel) at probe points."""
    if not probes:
        raise ValueError("validate_model needs at least one probe")

    violations = []
    for t, x in probes:
        if not grid.start <= t <= grid.horizon:
            raise ValueError(f"probe time {t} outside [{grid.start}, {grid.horizon}]")
        X = as_batch(x)
        x_list = X[0].tolist()
        try:
            for check, message in _probe_checks(model, cost, t, X):
                violations.append(Violation(t=t, x=x_list, check=check, message=message))
        except Exception as e:
            logger.warning(f"Evaluator failed at probe (t={t}, x={x_list}): {e}")
            violations.append(Violation(t=t, x=x_list, check="evaluator",
                                        message=f"evaluator failed at (t={t}, x={x_list}): {e}"))

    report = ValidationReport(n_probes=len(probes), violations=violations)
    if report.valid:
        logger.debug(f"Model {model.family} valid on {len(probes)} probes")
    else:
        logger.warning(f"Model {model.family}: {len(violations)} violation(s) on {len(probes)} probes")
    return report


def default_probes(model: ModelSpec, grid: TimeGrid, width: float = 2.0, count: int = 5):
    """Probe set spread over [start, T] x [x0 - width, x0 + width]^d."""
    if model.initial_law.is_point_mass:
        center = np.asarray(model.initial_law.point, dtype=float)
    else:
        center = np.zeros(model.dim)
    # counting processes only move up from x0
    low = 0.0 if model.family == "poisson" else -width
    probes = []
    for t in np.linspace(grid.start, grid.horizon, count):
        for s in np.linspace(low, width, count):
            probes.append((float(t), (center + s).tolist()))
    return probes
