"""Value sources: anything that can evaluate v(t, x) and its space gradient."""

from dataclasses import dataclass
from typing import Callable, Optional, Protocol, runtime_checkable

import numpy as np

from expotwist.config import settings
from expotwist.core.errors import NumericalFailureError

Array = np.ndarray


@runtime_checkable
class ValueSource(Protocol):
    eps_v: float
    has_analytic_gradient: bool

    def value(self, t: float, X: Array) -> Array: ...

    def gradient(self, t: float, X: Array, fd_step: Optional[float] = None) -> Array: ...


def default_fd_step(X: Array) -> Array:
    """Per-row step fd_relative_step * (1 + |x|)."""
    return settings.fd_relative_step * (1.0 + np.linalg.norm(X, axis=1))


@dataclass(frozen=True)
class AnalyticValue:
    """Closed-form v with optional analytic derivatives."""
    fn: Callable[[float, Array], Array]
    grad: Optional[Callable[[float, Array], Array]] = None
    hess: Optional[Callable[[float, Array], Array]] = None
    time_derivative: Optional[Callable[[float, Array], Array]] = None
    label: str = "analytic"
    eps_v: float = settings.eps_v
    horizon: Optional[float] = None

    @property
    def has_analytic_gradient(self) -> bool:
        return self.grad is not None

    def value(self, t: float, X: Array) -> Array:
        return np.maximum(self.fn(t, X), self.eps_v)

    def gradient(self, t: float, X: Array, fd_step: Optional[float] = None) -> Array:
        if self.grad is not None:
            return self.grad(t, X)

        X = np.asarray(X, dtype=float)
        h = default_fd_step(X) if fd_step is None else np.full(X.shape[0], float(fd_step))
        G = np.empty_like(X)
        for i in range(X.shape[1]):
            Xp, Xm = X.copy(), X.copy()
            Xp[:, i] += h
            Xm[:, i] -= h
            vp, vm = self.fn(t, Xp), self.fn(t, Xm)
            G[:, i] = (vp - vm) / (2.0 * h)
            if not np.all(np.isfinite(G[:, i])):
                bad = int(np.flatnonzero(~np.isfinite(G[:, i]))[0])
                raise NumericalFailureError(
                    f"non-finite gradient of {self.label} along axis {i}",
                    stencil={"t": t, "x": X[bad].tolist(), "v_plus": float(vp[bad]),
                             "v_minus": float(vm[bad]), "h": float(h[bad])},
                )
        return G


def constant_value(level: float = 1.0) -> AnalyticValue:
    """v identically equal to ``level`` (the null twist has level 1)."""
    return AnalyticValue(
        fn=lambda t, X: np.full(X.shape[0], float(level)),
        grad=lambda t, X: np.zeros_like(X, dtype=float),
        hess=lambda t, X: np.zeros((X.shape[0], X.shape[1], X.shape[1])),
        time_derivative=lambda t, X: np.zeros(X.shape[0]),
        label="constant",
    )
