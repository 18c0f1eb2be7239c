"""Reference dynamics and costs.

All callables are vectorized over a batch of states: ``X`` has shape
``(n, d)`` and ``t`` is a scalar time. They must be pure functions of
``(t, X)`` so the immutable specs below can be shared across threads.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

Array = np.ndarray
StateFn = Callable[[float, Array], Array]


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int
    start: float = 0.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if not self.horizon > self.start:
            raise ValueError(f"horizon must exceed start ({self.horizon} <= {self.start})")

    @property
    def dt(self) -> float:
        return (self.horizon - self.start) / self.n_steps

    @property
    def times(self) -> Array:
        return np.linspace(self.start, self.horizon, self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Nearest grid index to ``t``."""
        return int(round((t - self.start) / self.dt))

    def tail(self, k: int) -> "TimeGrid":
        """Sub-grid starting at the k-th node, same horizon."""
        if not 0 <= k < self.n_steps:
            raise ValueError(f"tail index {k} outside [0, {self.n_steps})")
        return TimeGrid(horizon=self.horizon, n_steps=self.n_steps - k, start=float(self.times[k]))


@dataclass(frozen=True)
class InitialLaw:
    """Either a point mass (``point``) or a sampler ``rng -> (d,)``."""
    point: Optional[Array] = None
    sampler: Optional[Callable[[np.random.Generator], Array]] = None
    density: Optional[Callable[[Array], Array]] = None
    label: str = "point"

    def __post_init__(self):
        if (self.point is None) == (self.sampler is None):
            raise ValueError("InitialLaw needs exactly one of point / sampler")

    @property
    def is_point_mass(self) -> bool:
        return self.point is not None

    def draw(self, rng: np.random.Generator) -> Array:
        if self.point is not None:
            return np.array(self.point, dtype=float)
        return np.asarray(self.sampler(rng), dtype=float)


@dataclass(frozen=True)
class JumpSpec:
    """Finite-activity Levy kernel L(t,x,dq) = intensity(t,x) * rho(t,x,dq).

    ``sampler(t, X, rng)`` draws one jump size per row of X. ``quadrature(t, X)``
    returns ``(nodes (n,m,d), weights (n,m))`` when rho is discrete or a 1-d
    density; ``None`` means the generator falls back to fixed-seed sampling.
    """
    intensity: StateFn
    sampler: Callable[[float, Array, np.random.Generator], Array]
    quadrature: Optional[Callable[[float, Array], Tuple[Array, Array]]] = None
    finite_activity: bool = True


@dataclass(frozen=True)
class ModelSpec:
    dim: int
    drift: StateFn
    diffusion: StateFn
    initial_law: InitialLaw
    jump: Optional[JumpSpec] = None
    family: str = "custom"
    params: Dict[str, Any] = field(default_factory=dict)

    def with_initial_point(self, x0) -> "ModelSpec":
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        return replace(self, initial_law=InitialLaw(point=x0))

    def diffusion_matrix(self, t: float, X: Array) -> Array:
        """sigma sigma^T at every row of X, shape (n, d, d)."""
        S = self.diffusion(t, X)
        return np.einsum("nij,nkj->nik", S, S)


@dataclass(frozen=True)
class CostSpec:
    running: StateFn
    terminal: Callable[[Array], Array]
    # Benchmark key when v has a closed form (see core.oracles)
    analytic: Optional[str] = None
    params: Dict[str, Any] = field(default_factory=dict)
    is_zero: bool = False
