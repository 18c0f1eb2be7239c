import math

import numpy as np
import pytest

from expotwist.core.families import build_cost, build_model, zero_cost
from expotwist.core.oracles import (
    BENCHMARKS,
    GaussianQuadraticOracle,
    PoissonLinearOracle,
    analytic_value,
    benchmark_table,
    resolve_oracle,
)
from expotwist.schemas.model import TimeGrid


def test_gaussian_benchmark_values(gaussian_oracle):
    """gamma = 1/2, T = 1: -log Z = ln 2 / 2, E[phi] = 1/4, H = ln 2 / 2 - 1/4"""
    assert gaussian_oracle.minus_log_z() == pytest.approx(0.5 * math.log(2.0), rel=1e-14)
    assert gaussian_oracle.mean_phi_qstar() == pytest.approx(0.25, rel=1e-14)
    assert gaussian_oracle.entropy() == pytest.approx(0.5 * math.log(2.0) - 0.25, rel=1e-12)
    assert gaussian_oracle.twisted_terminal_var() == pytest.approx(0.5)
    assert gaussian_oracle.uncontrolled_cost() == pytest.approx(0.5)


def test_gaussian_value_is_normalizer(gaussian_oracle):
    """v(0, x0) = Z"""
    v = gaussian_oracle.value()
    assert float(v.value(0.0, np.zeros((1, 1)))[0]) == pytest.approx(gaussian_oracle.z(), rel=1e-14)


def test_gaussian_twisted_drift(gaussian_oracle):
    """b*(0, 1) = -2 gamma x / (1 + 2 gamma T) = -0.5"""
    assert gaussian_oracle.twisted_drift(0.0, 1.0) == pytest.approx(-0.5)


def test_gaussian_meanfield_root(gaussian_oracle):
    """c = 0.5 / (1 + c) has root (sqrt 3 - 1) / 2"""
    assert gaussian_oracle.meanfield_multiplier(1.0) == pytest.approx((math.sqrt(3.0) - 1.0) / 2.0, abs=1e-12)
    assert gaussian_oracle.linearized_mean(1.0) == pytest.approx(0.25)


def test_integrability_grid_sum_close_to_integral(gaussian_oracle):
    """The left-endpoint sum converges to the quadrature value"""
    exact = gaussian_oracle.integrability(1.5)
    summed = gaussian_oracle.integrability(1.5, TimeGrid(horizon=1.0, n_steps=2000))
    assert exact > 0
    assert summed == pytest.approx(exact, rel=1e-3)


def test_poisson_benchmark_values(poisson_oracle):
    """lam = 2, c = ln 2: twisted rate 1, -log Z = 1"""
    assert poisson_oracle.twisted_rate() == pytest.approx(1.0)
    assert poisson_oracle.minus_log_z() == pytest.approx(1.0)
    assert poisson_oracle.mean_phi_qstar() == pytest.approx(math.log(2.0))
    assert poisson_oracle.entropy() == pytest.approx(1.0 - math.log(2.0))


def test_resolve_oracle_matches_families(bm, quadratic_cost, poisson, linear_cost, grid):
    assert isinstance(resolve_oracle(bm, quadratic_cost, grid), GaussianQuadraticOracle)
    assert isinstance(resolve_oracle(poisson, linear_cost, grid), PoissonLinearOracle)
    ou = build_model("ou", theta=1.0, sigma=1.0)
    assert resolve_oracle(ou, quadratic_cost, grid) is None


def test_analytic_value_null_is_constant(bm, grid):
    v = analytic_value(bm, zero_cost(), grid)
    X = np.linspace(-3, 3, 7)[:, None]
    assert np.array_equal(v.value(0.3, X), np.ones(7))
    assert np.array_equal(v.gradient(0.3, X), np.zeros((7, 1)))


def test_analytic_value_for_gaussian_initial_law(quadratic_cost, grid):
    """v does not depend on the initial law, so a Gaussian start still resolves"""
    model = build_model("bm", sigma=1.0, initial="gaussian", initial_std=0.5)
    assert analytic_value(model, quadratic_cost, grid) is not None


def test_analytic_value_unknown_pair(grid):
    model = build_model("ou", theta=1.0, sigma=1.0)
    assert analytic_value(model, build_cost(running="quadratic", running_coef=1.0), grid) is None


@pytest.mark.parametrize("name", BENCHMARKS)
def test_benchmark_tables(name):
    table = benchmark_table(name)
    assert table
    assert all(math.isfinite(v) for v in table.values())


def test_unknown_benchmark():
    with pytest.raises(ValueError):
        benchmark_table("nope")
