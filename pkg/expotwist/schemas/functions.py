from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class TestFunction:
    """Scalar test function phi(t, x) with optional analytic derivatives.

    Missing derivatives are computed with central finite differences by the
    generator evaluators.
    """
    __test__ = False  # not a pytest class

    fn: Callable[[float, Array], Array]
    grad: Optional[Callable[[float, Array], Array]] = None
    hess: Optional[Callable[[float, Array], Array]] = None
    time_derivative: Optional[Callable[[float, Array], Array]] = None
    name: str = "phi"

    def __call__(self, t: float, X: Array) -> Array:
        return self.fn(t, X)

    def product(self, other: "TestFunction") -> "TestFunction":
        a, b = self, other
        grad = hess = dtime = None
        if a.grad is not None and b.grad is not None:
            def grad(t, X):
                return a.grad(t, X) * b.fn(t, X)[:, None] + a.fn(t, X)[:, None] * b.grad(t, X)

            if a.hess is not None and b.hess is not None:
                def hess(t, X):
                    ga, gb = a.grad(t, X), b.grad(t, X)
                    outer = np.einsum("ni,nj->nij", ga, gb)
                    return (a.hess(t, X) * b.fn(t, X)[:, None, None]
                            + outer + np.swapaxes(outer, 1, 2)
                            + a.fn(t, X)[:, None, None] * b.hess(t, X))
        if a.time_derivative is not None and b.time_derivative is not None:
            def dtime(t, X):
                return a.time_derivative(t, X) * b.fn(t, X) + a.fn(t, X) * b.time_derivative(t, X)

        return TestFunction(
            fn=lambda t, X: a.fn(t, X) * b.fn(t, X),
            grad=grad, hess=hess, time_derivative=dtime,
            name=f"{a.name}*{b.name}",
        )


def identity(axis: int = 0, dim: int = 1) -> TestFunction:
    """phi(t, x) = x_axis."""
    def grad(t, X):
        G = np.zeros_like(X, dtype=float)
        G[:, axis] = 1.0
        return G

    return TestFunction(
        fn=lambda t, X: np.array(X[:, axis], dtype=float),
        grad=grad,
        hess=lambda t, X: np.zeros((X.shape[0], X.shape[1], X.shape[1])),
        time_derivative=lambda t, X: np.zeros(X.shape[0]),
        name=f"x{axis + 1}",
    )


def coordinate_power(power: int, axis: int = 0) -> TestFunction:
    """phi(t, x) = x_axis ** power."""
    def grad(t, X):
        G = np.zeros_like(X, dtype=float)
        G[:, axis] = power * X[:, axis] ** (power - 1) if power >= 1 else 0.0
        return G

    def hess(t, X):
        H = np.zeros((X.shape[0], X.shape[1], X.shape[1]))
        if power >= 2:
            H[:, axis, axis] = power * (power - 1) * X[:, axis] ** (power - 2)
        return H

    return TestFunction(
        fn=lambda t, X: np.asarray(X[:, axis], dtype=float) ** power,
        grad=grad, hess=hess,
        time_derivative=lambda t, X: np.zeros(X.shape[0]),
        name=f"x{axis + 1}^{power}",
    )


def constant(value: float) -> TestFunction:
    return TestFunction(
        fn=lambda t, X: np.full(X.shape[0], float(value)),
        grad=lambda t, X: np.zeros_like(X, dtype=float),
        hess=lambda t, X: np.zeros((X.shape[0], X.shape[1], X.shape[1])),
        time_derivative=lambda t, X: np.zeros(X.shape[0]),
        name=f"const({value})",
    )


def numeric(fn: Callable[[float, Array], Array], name: str = "phi") -> TestFunction:
    """Test function without analytic derivatives (finite-difference fallback)."""
    return TestFunction(fn=fn, name=name)


@dataclass(frozen=True)
class ControlPolicy:
    """Markovian feedback u(t, x), vectorized: (n, d) -> (n, d)."""
    name: str
    feedback: Callable[[float, Array], Array]
    provenance: Literal["from-value-surface", "analytic", "user-supplied"] = "user-supplied"


def zero_policy(name: str = "zero") -> ControlPolicy:
    return ControlPolicy(
        name=name,
        feedback=lambda t, X: np.zeros_like(X, dtype=float),
        provenance="user-supplied",
    )
