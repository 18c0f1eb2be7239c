"""Closed-form benchmark oracles.

Two benchmarks have explicit value functions:

* Gaussian quadratic: X = x0 + sigma W (no drift), f = 0, g = gamma |x|^2.
  v(t, x) = s^{-d/2} exp(-gamma |x|^2 / s) with s = 1 + 2 gamma sigma^2 (T - t).
* Poisson linear: X counts unit-size jumps at rate lam, f = 0, g = c x.
  v(t, x) = exp(-c x - lam (T - t) (1 - e^{-c q})).

Everything the tests and the ``oracle`` subcommand compare against is
derived from these two formulas.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import integrate, optimize
from scipy.special import gammaln

from expotwist.schemas.model import CostSpec, ModelSpec, TimeGrid
from expotwist.schemas.value import AnalyticValue, constant_value


@dataclass(frozen=True)
class GaussianQuadraticOracle:
    gamma: float = 0.5
    sigma: float = 1.0
    horizon: float = 1.0
    dim: int = 1
    x0: float = 0.0

    def _s(self, t):
        return 1.0 + 2.0 * self.gamma * self.sigma ** 2 * (self.horizon - t)

    @property
    def _x0(self) -> np.ndarray:
        return np.full(self.dim, float(self.x0))

    def value(self) -> AnalyticValue:
        g, sig2, d = self.gamma, self.sigma ** 2, self.dim

        def fn(t, X):
            s = self._s(t)
            return s ** (-d / 2.0) * np.exp(-g * np.sum(X ** 2, axis=1) / s)

        def grad(t, X):
            return (-2.0 * g / self._s(t)) * X * fn(t, X)[:, None]

        def hess(t, X):
            a = 2.0 * g / self._s(t)
            v = fn(t, X)[:, None, None]
            eye = np.eye(X.shape[1])[None, :, :]
            return v * (a * a * np.einsum("ni,nj->nij", X, X) - a * eye)

        def time_derivative(t, X):
            s = self._s(t)
            ds_dt = -2.0 * g * sig2
            return fn(t, X) * ds_dt * (-d / (2.0 * s) + g * np.sum(X ** 2, axis=1) / s ** 2)

        return AnalyticValue(fn=fn, grad=grad, hess=hess, time_derivative=time_derivative,
                             label="gaussian_quadratic", horizon=self.horizon)

    # --- scalar oracles ---
    @property
    def _s0(self) -> float:
        return self._s(0.0)

    def minus_log_z(self) -> float:
        x2 = float(np.sum(self._x0 ** 2))
        return 0.5 * self.dim * math.log(self._s0) + self.gamma * x2 / self._s0

    def z(self) -> float:
        return math.exp(-self.minus_log_z())

    def twisted_terminal_mean(self) -> float:
        return self.x0 / self._s0

    def twisted_terminal_var(self) -> float:
        return self.sigma ** 2 * self.horizon / self._s0

    def mean_phi_qstar(self) -> float:
        x2 = float(np.sum(self._x0 ** 2))
        return self.gamma * (x2 / self._s0 ** 2 + self.dim * self.twisted_terminal_var())

    def entropy(self) -> float:
        return self.minus_log_z() - self.mean_phi_qstar()

    def uncontrolled_cost(self) -> float:
        """J(0) = E_P[g(X_T)]."""
        x2 = float(np.sum(self._x0 ** 2))
        return self.gamma * (x2 + self.dim * self.sigma ** 2 * self.horizon)

    def twisted_drift(self, t: float, x: float) -> float:
        return -self.sigma ** 2 * 2.0 * self.gamma * x / self._s(t)

    def twisted_marginal(self, t: float):
        """Mean and per-axis variance of X_t under Q*."""
        if t <= 0.0:
            return self.x0, 0.0
        prec = 1.0 / (self.sigma ** 2 * t) + 2.0 * self.gamma / self._s(t)
        return (self.x0 / (self.sigma ** 2 * t)) / prec, 1.0 / prec

    def _abs_moment(self, t: float, p: float) -> float:
        """E_{Q*}|Gamma(v)/v|^p at time t."""
        scale = 2.0 * self.gamma * self.sigma ** 2 / self._s(t)
        mean, var = self.twisted_marginal(t)
        if var == 0.0:
            return float((scale * abs(mean) * math.sqrt(self.dim)) ** p)
        if mean == 0.0:
            # |X| is chi-distributed
            log_m = (p / 2.0) * math.log(2.0 * var) + gammaln((self.dim + p) / 2.0) - gammaln(self.dim / 2.0)
            return scale ** p * math.exp(log_m)
        if self.dim != 1:
            raise ValueError("non-centred integrability oracle only implemented for d = 1")
        z, w = hermegauss(80)
        vals = np.abs(scale * (mean + math.sqrt(var) * z)) ** p
        return float(np.sum(w * vals) / math.sqrt(2.0 * math.pi))

    def integrability(self, p: float, grid: Optional[TimeGrid] = None) -> float:
        """E_{Q*} int_0^T |Gamma(v)/v|^p dt (left-endpoint sum when a grid is given)."""
        if grid is not None:
            return math.fsum(self._abs_moment(t, p) * grid.dt for t in grid.times[:-1])
        value, _ = integrate.quad(lambda t: self._abs_moment(t, p), 0.0, self.horizon, limit=200)
        return value

    # --- mean-field (F(m) = a/2 m^2) ---
    def linearized_mean(self, c: float) -> float:
        """E_{Q*_c}[phi] for the twist with cost c * phi."""
        s_c = 1.0 + 2.0 * c * self.gamma * self.sigma ** 2 * self.horizon
        x2 = float(np.sum(self._x0 ** 2))
        return self.gamma * (x2 / s_c ** 2 + self.dim * self.sigma ** 2 * self.horizon / s_c)

    def meanfield_multiplier(self, curvature: float = 1.0) -> float:
        """Root of c = curvature * m(c)."""
        upper = curvature * self.linearized_mean(0.0)
        if upper == 0.0:
            return 0.0
        return optimize.brentq(lambda c: c - curvature * self.linearized_mean(c), 0.0, upper, xtol=1e-14)

    def table(self) -> Dict[str, float]:
        return {
            "Z": self.z(),
            "minus_log_Z": self.minus_log_z(),
            "mean_phi_Qstar": self.mean_phi_qstar(),
            "entropy": self.entropy(),
            "twisted_var_XT": self.twisted_terminal_var(),
            "J_zero_control": self.uncontrolled_cost(),
            "J_optimal_control": self.minus_log_z(),
            "twisted_drift_t0_x1": self.twisted_drift(0.0, 1.0),
            "integrability_p1.5": self.integrability(1.5),
        }


@dataclass(frozen=True)
class PoissonLinearOracle:
    rate: float = 2.0
    coef: float = math.log(2.0)
    horizon: float = 1.0
    jump_size: float = 1.0
    x0: float = 0.0

    @property
    def _damping(self) -> float:
        return 1.0 - math.exp(-self.coef * self.jump_size)

    def value(self) -> AnalyticValue:
        c, lam, T = self.coef, self.rate, self.horizon

        def fn(t, X):
            return np.exp(-c * X[:, 0] - lam * (T - t) * self._damping)

        def grad(t, X):
            G = np.zeros_like(X, dtype=float)
            G[:, 0] = -c * fn(t, X)
            return G

        def hess(t, X):
            H = np.zeros((X.shape[0], X.shape[1], X.shape[1]))
            H[:, 0, 0] = c * c * fn(t, X)
            return H

        def time_derivative(t, X):
            return lam * self._damping * fn(t, X)

        return AnalyticValue(fn=fn, grad=grad, hess=hess, time_derivative=time_derivative,
                             label="poisson_linear", horizon=self.horizon)

    def minus_log_z(self) -> float:
        return self.coef * self.x0 + self.rate * self.horizon * self._damping

    def z(self) -> float:
        return math.exp(-self.minus_log_z())

    def twisted_rate(self) -> float:
        return self.rate * math.exp(-self.coef * self.jump_size)

    def twisted_mean_jumps(self) -> float:
        return self.twisted_rate() * self.horizon

    def mean_phi_qstar(self) -> float:
        return self.coef * (self.x0 + self.jump_size * self.twisted_mean_jumps())

    def entropy(self) -> float:
        return self.minus_log_z() - self.mean_phi_qstar()

    def linearized_mean(self, c: float) -> float:
        """E_{Q*_c}[phi] for cost c * phi, phi = coef * X_T."""
        rate_c = self.rate * math.exp(-c * self.coef * self.jump_size)
        return self.coef * (self.x0 + self.jump_size * rate_c * self.horizon)

    def table(self) -> Dict[str, float]:
        return {
            "Z": self.z(),
            "minus_log_Z": self.minus_log_z(),
            "mean_phi_Qstar": self.mean_phi_qstar(),
            "entropy": self.entropy(),
            "twisted_rate": self.twisted_rate(),
            "twisted_mean_jumps": self.twisted_mean_jumps(),
        }


BENCHMARKS = ("gaussian-quadratic", "poisson-linear", "meanfield-quadratic", "null")


def benchmark_table(name: str) -> Dict[str, float]:
    """Oracle values printed by the ``oracle`` subcommand (default benchmark parameters)."""
    if name == "gaussian-quadratic":
        return GaussianQuadraticOracle().table()
    if name == "poisson-linear":
        return PoissonLinearOracle().table()
    if name == "meanfield-quadratic":
        oracle = GaussianQuadraticOracle()
        c_star = oracle.meanfield_multiplier()
        return {"c_star": c_star, "m_star": oracle.linearized_mean(c_star),
                "closed_form_c_star": (math.sqrt(3.0) - 1.0) / 2.0}
    if name == "null":
        return {"Z": 1.0, "minus_log_Z": 0.0, "mean_phi_Qstar": 0.0, "entropy": 0.0, "gap": 0.0}
    raise ValueError(f"Unknown benchmark '{name}' (expected one of {', '.join(BENCHMARKS)})")


def _is_zero(values) -> bool:
    return all(float(v) == 0.0 for v in np.atleast_1d(values))


def resolve_oracle(model: ModelSpec, cost: CostSpec, grid: TimeGrid):
    """Benchmark oracle matching (model, cost), or None when v has no closed form here."""
    if not model.initial_law.is_point_mass or grid.start != 0.0:
        return None
    x0 = np.asarray(model.initial_law.point, dtype=float)
    coef = cost.params.get("terminal_coef", 0.0)

    if (cost.analytic == "gaussian_quadratic" and model.family == "bm" and model.jump is None
            and _is_zero(model.params.get("drift", 0.0)) and np.all(x0 == x0[0])):
        return GaussianQuadraticOracle(gamma=coef, sigma=model.params["sigma"], horizon=grid.horizon,
                                       dim=model.dim, x0=float(x0[0]))
    if (cost.analytic == "poisson_linear" and model.family == "poisson" and model.dim == 1
            and model.params.get("sigma", 0.0) == 0.0 and _is_zero(model.params.get("drift", 0.0))):
        return PoissonLinearOracle(rate=model.params["rate"], coef=coef, horizon=grid.horizon,
                                   jump_size=model.params["jump_size"][0], x0=float(x0[0]))
    return None


def analytic_value(model: ModelSpec, cost: CostSpec, grid: TimeGrid) -> Optional[AnalyticValue]:
    """Closed-form value source when the (model, cost) pair is a known benchmark."""
    if cost.is_zero:
        return constant_value(1.0)
    oracle = resolve_oracle(model, cost, grid)
    if oracle is not None:
        return oracle.value()

    # v does not depend on x0, so rebuild the oracle from a point-mass copy
    if not model.initial_law.is_point_mass and grid.start == 0.0:
        probe = model.with_initial_point(np.zeros(model.dim))
        oracle = resolve_oracle(probe, cost, grid)
        if oracle is not None:
            return oracle.value()
    return None
