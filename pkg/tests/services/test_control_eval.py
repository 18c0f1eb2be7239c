import math

import numpy as np
import pytest

from expotwist.core.errors import UnsupportedModelError
from expotwist.core.families import build_model
from expotwist.core.oracles import GaussianQuadraticOracle
from expotwist.schemas.functions import ControlPolicy, zero_policy
from expotwist.schemas.model import TimeGrid
from expotwist.schemas.value import AnalyticValue, constant_value
from expotwist.services.control_eval import (
    compare_controls,
    cost_functional,
    entropy_from_control,
    optimal_control,
    optimal_policy,
)
from expotwist.services.twist_engine import build_twisted_model


@pytest.fixture
def twisted(bm, gaussian_oracle):
    return build_twisted_model(bm, gaussian_oracle.value())


def _scaled(policy, s):
    return ControlPolicy(name=f"{s}*u*", feedback=lambda t, X: s * policy.feedback(t, X))


def test_optimal_control_unit_sigma(twisted):
    assert optimal_control(twisted, 0.0, [1.0])[0] == pytest.approx(-0.5, rel=1e-12)
    U = optimal_control(twisted, 0.0, np.array([[0.0], [2.0]]))
    assert U.shape == (2, 1)
    assert U[0, 0] == 0.0


def test_optimal_control_solves_sigma():
    """sigma u* equals the twisted drift correction"""
    oracle = GaussianQuadraticOracle(gamma=0.5, sigma=2.0)
    model = build_model("bm", sigma=2.0)
    twisted = build_twisted_model(model, oracle.value())
    u = optimal_control(twisted, 0.0, [1.0])[0]
    assert 2.0 * u == pytest.approx(oracle.twisted_drift(0.0, 1.0), rel=1e-12)


def test_singular_sigma():
    model = build_model("bm", sigma=0.0)
    exact = GaussianQuadraticOracle().value()
    assert optimal_control(build_twisted_model(model, exact), 0.0, [1.0])[0] == 0.0
    numeric = AnalyticValue(fn=exact.fn)
    with pytest.raises(UnsupportedModelError):
        optimal_control(build_twisted_model(model, numeric), 0.0, [1.0])


def test_optimal_cost_is_minus_log_z(bm, quadratic_cost, gaussian_oracle, twisted, seed, grid):
    J, se = cost_functional(bm, quadratic_cost, optimal_policy(twisted), grid, 20000, seed)
    assert J == pytest.approx(0.5 * math.log(2.0), abs=4 * se + 2 * grid.dt)


def test_zero_control_cost(bm, quadratic_cost, gaussian_oracle, seed, grid):
    """J(0) = E[X_T^2] / 2 = 1/2"""
    J, se = cost_functional(bm, quadratic_cost, zero_policy(), grid, 20000, seed)
    assert abs(J - gaussian_oracle.uncontrolled_cost()) < 4 * se


def test_ranking_puts_optimal_first(bm, quadratic_cost, gaussian_oracle, twisted, seed, grid):
    optimal = optimal_policy(twisted)
    policies = [zero_policy(), _scaled(optimal, 0.5), optimal]
    report = compare_controls(bm, quadratic_cost, policies, grid, 5000, seed,
                              minus_log_z=gaussian_oracle.minus_log_z())
    assert report.reference == "u*"
    assert report.rows[0].policy_name == "u*"
    assert [r.J for r in report.rows] == sorted(r.J for r in report.rows)
    assert not report.red_flags
    assert report.by_name("zero").gap_to_minus_logZ > 0


def test_ranking_flags_a_policy_beating_the_reference(bm, quadratic_cost, twisted, seed, grid):
    """A mislabelled reference is reported, not silently accepted"""
    fake = ControlPolicy(name="claimed", feedback=lambda t, X: np.zeros_like(X), provenance="analytic")
    report = compare_controls(bm, quadratic_cost, [fake, optimal_policy(twisted)], grid, 5000, seed)
    assert report.reference == "claimed"
    assert len(report.red_flags) == 1


def test_compare_controls_needs_a_policy(bm, quadratic_cost, seed, grid):
    with pytest.raises(ValueError):
        compare_controls(bm, quadratic_cost, [], grid, 10, seed)


def test_jump_models_are_unsupported(poisson, linear_cost, seed, grid):
    twisted = build_twisted_model(poisson, constant_value(1.0))
    with pytest.raises(UnsupportedModelError):
        optimal_policy(twisted)
    with pytest.raises(UnsupportedModelError):
        cost_functional(poisson, linear_cost, zero_policy(), grid, 10, seed)


def test_entropy_from_control(twisted, gaussian_oracle, seed, grid):
    """E_Q*[int |u*|^2 / 2 dt] is the relative entropy"""
    H, se = entropy_from_control(twisted, grid, 20000, seed)
    assert abs(H - gaussian_oracle.entropy()) < 4 * se + 2 * grid.dt


def test_entropy_from_control_needs_point_mass(gaussian_oracle, seed, grid):
    model = build_model("bm", initial="gaussian")
    with pytest.raises(UnsupportedModelError):
        entropy_from_control(build_twisted_model(model, gaussian_oracle.value()), grid, 10, seed)
