"""Built-in model and cost families.

These are the families a run config can name: constant/linear drift
Brownian diffusions, Ornstein-Uhlenbeck, Poisson unit jumps and
compound-Poisson with Gaussian sizes. Costs are zero / constant / quadratic
running costs and zero / quadratic / linear terminal costs.
"""

import logging
from typing import Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from expotwist.config import settings
from expotwist.schemas.model import CostSpec, InitialLaw, JumpSpec, ModelSpec

logger = logging.getLogger(__name__)

MODEL_FAMILIES = ("bm", "linear", "ou", "poisson", "compound_poisson")
RUNNING_FAMILIES = ("zero", "constant", "quadratic")
TERMINAL_FAMILIES = ("zero", "quadratic", "linear")


def _vector(value, dim: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        return np.full(dim, float(arr[0]))
    if arr.size != dim:
        raise ValueError(f"expected {dim} components, got {arr.size}")
    return arr


def _constant_diffusion(sigma: float, dim: int):
    S = float(sigma) * np.eye(dim)

    def diffusion(t, X):
        return np.broadcast_to(S, (X.shape[0], dim, dim)).copy()

    return diffusion


def _initial_law(dim: int, x0, initial: str = "point", initial_std: float = 1.0) -> InitialLaw:
    mean = _vector(x0, dim)
    if initial == "point":
        return InitialLaw(point=mean, label="point")
    if initial == "gaussian":
        std = float(initial_std)
        norm = (2.0 * np.pi * std ** 2) ** (-dim / 2.0)

        def sampler(rng):
            return mean + std * rng.standard_normal(dim)

        def density(X):
            X = np.atleast_2d(X)
            return norm * np.exp(-np.sum((X - mean) ** 2, axis=1) / (2.0 * std ** 2))

        return InitialLaw(sampler=sampler, density=density, label="gaussian")
    raise ValueError(f"Unknown initial law: {initial}")


def brownian(dim: int = 1, sigma: float = 1.0, drift=0.0, x0=0.0,
             initial: str = "point", initial_std: float = 1.0) -> ModelSpec:
    """dX = b dt + sigma dW with constant b (the 'bm' family)."""
    b = _vector(drift, dim)

    def drift_fn(t, X):
        return np.broadcast_to(b, X.shape).copy()

    return ModelSpec(
        dim=dim,
        drift=drift_fn,
        diffusion=_constant_diffusion(sigma, dim),
        initial_law=_initial_law(dim, x0, initial, initial_std),
        family="bm",
        params={"sigma": float(sigma), "drift": b.tolist(), "x0": _vector(x0, dim).tolist(),
                "initial": initial, "initial_std": float(initial_std)},
    )


def linear_drift(dim: int = 1, slope: float = 0.0, drift=0.0, sigma: float = 1.0, x0=0.0,
                 initial: str = "point", initial_std: float = 1.0) -> ModelSpec:
    """b(t, x) = slope * x + drift."""
    c = _vector(drift, dim)
    a = float(slope)

    return ModelSpec(
        dim=dim,
        drift=lambda t, X: a * X + c,
        diffusion=_constant_diffusion(sigma, dim),
        initial_law=_initial_law(dim, x0, initial, initial_std),
        family="linear",
        params={"slope": a, "drift": c.tolist(), "sigma": float(sigma)},
    )


def ornstein_uhlenbeck(dim: int = 1, theta: float = 1.0, mean=0.0, sigma: float = 1.0, x0=0.0,
                       initial: str = "point", initial_std: float = 1.0) -> ModelSpec:
    m = _vector(mean, dim)
    k = float(theta)

    return ModelSpec(
        dim=dim,
        drift=lambda t, X: k * (m - X),
        diffusion=_constant_diffusion(sigma, dim),
        initial_law=_initial_law(dim, x0, initial, initial_std),
        family="ou",
        params={"theta": k, "mean": m.tolist(), "sigma": float(sigma)},
    )


def poisson_unit_jumps(rate: float, dim: int = 1, jump_size: float = 1.0, drift=0.0,
                       sigma: float = 0.0, x0=0.0) -> ModelSpec:
    """Poisson counting process with deterministic jumps (rho = point mass)."""
    lam = float(rate)
    q = _vector(jump_size, dim)
    b = _vector(drift, dim)

    def intensity(t, X):
        return np.full(X.shape[0], lam)

    def sampler(t, X, rng):
        return np.broadcast_to(q, X.shape).copy()

    def quadrature(t, X):
        nodes = np.broadcast_to(q, (X.shape[0], 1, dim))
        weights = np.ones((X.shape[0], 1))
        return nodes, weights

    return ModelSpec(
        dim=dim,
        drift=lambda t, X: np.broadcast_to(b, X.shape).copy(),
        diffusion=_constant_diffusion(sigma, dim),
        initial_law=_initial_law(dim, x0),
        jump=JumpSpec(intensity=intensity, sampler=sampler, quadrature=quadrature),
        family="poisson",
        params={"rate": lam, "jump_size": q.tolist(), "sigma": float(sigma), "drift": b.tolist()},
    )


def compound_poisson_gaussian(rate: float, jump_mean: float = 0.0, jump_std: float = 1.0,
                              dim: int = 1, drift=0.0, sigma: float = 1.0, x0=0.0,
                              initial: str = "point", initial_std: float = 1.0,
                              n_nodes: Optional[int] = None) -> ModelSpec:
    """Jump diffusion with N(jump_mean, jump_std^2 I) jump sizes."""
    lam = float(rate)
    mu_q = _vector(jump_mean, dim)
    sd_q = float(jump_std)
    b = _vector(drift, dim)

    def intensity(t, X):
        return np.full(X.shape[0], lam)

    def sampler(t, X, rng):
        return mu_q + sd_q * rng.standard_normal(X.shape)

    quadrature = None
    if dim == 1:
        # Gauss-Hermite (probabilists'): sum(w) = sqrt(2 pi)
        z, w = hermegauss(n_nodes or settings.jump_quadrature_nodes)
        nodes_1d = (mu_q[0] + sd_q * z)[:, None]
        weights_1d = w / np.sqrt(2.0 * np.pi)

        def quadrature(t, X):
            n = X.shape[0]
            return (np.broadcast_to(nodes_1d, (n,) + nodes_1d.shape),
                    np.broadcast_to(weights_1d, (n, weights_1d.size)))

    return ModelSpec(
        dim=dim,
        drift=lambda t, X: np.broadcast_to(b, X.shape).copy(),
        diffusion=_constant_diffusion(sigma, dim),
        initial_law=_initial_law(dim, x0, initial, initial_std),
        jump=JumpSpec(intensity=intensity, sampler=sampler, quadrature=quadrature),
        family="compound_poisson",
        params={"rate": lam, "jump_mean": mu_q.tolist(), "jump_std": sd_q,
                "sigma": float(sigma), "drift": b.tolist()},
    )


MODEL_BUILDERS = {
    "bm": brownian,
    "linear": linear_drift,
    "ou": ornstein_uhlenbeck,
    "poisson": poisson_unit_jumps,
    "compound_poisson": compound_poisson_gaussian,
}


def build_model(family: str, **params) -> ModelSpec:
    if family not in MODEL_BUILDERS:
        raise ValueError(f"Unknown model family '{family}' (expected one of {', '.join(MODEL_FAMILIES)})")
    logger.debug(f"Building model family {family} with {params}")
    return MODEL_BUILDERS[family](**params)


# --- COSTS ---

def build_cost(running: str = "zero", running_coef: float = 0.0,
               terminal: str = "zero", terminal_coef: float = 0.0) -> CostSpec:
    """Assemble f and g from the named families."""
    a, c = float(running_coef), float(terminal_coef)

    if running == "zero":
        f = lambda t, X: np.zeros(X.shape[0])
    elif running == "constant":
        f = lambda t, X: np.full(X.shape[0], a)
    elif running == "quadratic":
        f = lambda t, X: a * np.sum(X ** 2, axis=1)
    else:
        raise ValueError(f"Unknown running cost '{running}'")

    if terminal == "zero":
        g = lambda X: np.zeros(X.shape[0])
    elif terminal == "quadratic":
        g = lambda X: c * np.sum(X ** 2, axis=1)
    elif terminal == "linear":
        g = lambda X: c * np.sum(X, axis=1)
    else:
        raise ValueError(f"Unknown terminal cost '{terminal}'")

    running_zero = running == "zero" or a == 0.0
    terminal_zero = terminal == "zero" or c == 0.0

    analytic = None
    if running_zero and terminal_zero:
        analytic = "null"
    elif running_zero and terminal == "quadratic":
        analytic = "gaussian_quadratic"
    elif running_zero and terminal == "linear":
        analytic = "poisson_linear"

    return CostSpec(
        running=f,
        terminal=g,
        analytic=analytic,
        params={"running": running, "running_coef": a, "terminal": terminal,
                "terminal_coef": c},
        is_zero=running_zero and terminal_zero,
    )


def zero_cost() -> CostSpec:
    return build_cost()
