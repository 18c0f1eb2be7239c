import csv
import math

import numpy as np
import pytest

from expotwist.config import settings
from expotwist.core.errors import DegenerateTwistError, InvariantViolationError
from expotwist.core.families import build_model
from expotwist.schemas.model import TimeGrid
from expotwist.schemas.value import AnalyticValue, constant_value
from expotwist.services.path_sampler import sample_paths
from expotwist.services.twist_engine import (
    build_twisted_model,
    dump_twisted_drift,
    generalized_gradient,
    sample_initial_twisted,
    simulate_twisted,
    twisted_drift,
    twisted_jump_proposal,
)


def _flat(level):
    return AnalyticValue(fn=lambda t, X: np.full(X.shape[0], float(level)), label=f"flat_{level}")


@pytest.mark.parametrize("family", ["bm", "poisson", "compound_poisson"])
def test_null_twist_replays_reference_paths(family, seed):
    """v = 1 leaves drift, jumps and random streams untouched"""
    params = {"rate": 2.0} if family != "bm" else {}
    model = build_model(family, **params)
    grid = TimeGrid(horizon=1.0, n_steps=50)
    twisted = build_twisted_model(model, constant_value(1.0))
    reference = sample_paths(model, grid, 200, seed)
    under_q = simulate_twisted(twisted, grid, 200, seed)
    assert np.array_equal(reference.states, under_q.states)
    assert np.array_equal(reference.jump_counts, under_q.jump_counts)


def test_twisted_drift_gaussian(bm, gaussian_oracle):
    """b* = -sigma^2 2 gamma x / (1 + 2 gamma sigma^2 (T - t)); -0.5 at (0, 1)"""
    twisted = build_twisted_model(bm, gaussian_oracle.value())
    assert twisted_drift(twisted, 0.0, [1.0])[0] == pytest.approx(-0.5, rel=1e-12)
    X = np.array([[-2.0], [0.0], [3.0]])
    B = twisted_drift(twisted, 0.5, X)
    expected = [gaussian_oracle.twisted_drift(0.5, x) for x in X[:, 0]]
    assert np.allclose(B[:, 0], expected, rtol=1e-12)


def test_twisted_drift_finite_difference_gradient(bm, gaussian_oracle):
    """Without an analytic gradient central differences land within O(h^2)"""
    exact = gaussian_oracle.value()
    numeric = AnalyticValue(fn=exact.fn, label="fd")
    twisted = build_twisted_model(bm, numeric)
    assert twisted_drift(twisted, 0.0, [1.0])[0] == pytest.approx(-0.5, abs=1e-6)


def test_generalized_gradient_scales_with_diffusion(gaussian_oracle):
    model = build_model("bm", sigma=2.0)
    value = gaussian_oracle.value()
    x = np.array([1.0])
    g = generalized_gradient(value, model, 0.0, x)
    assert g[0] == pytest.approx(4.0 * value.grad(0.0, x[None, :])[0, 0], rel=1e-14)


def test_jump_acceptance_and_envelope(poisson, poisson_oracle):
    value = poisson_oracle.value()
    twisted = build_twisted_model(poisson, value)
    x, q = np.array([0.0]), np.array([1.0])
    assert twisted.acceptance(0.0, x, q) == pytest.approx(0.5 * math.exp(-1.0), rel=1e-14)
    envelope = twisted.envelope(0.0, x[None, :])[0]
    # proposal rate times acceptance is the twisted rate lam e^{-c}
    assert envelope * twisted.acceptance(0.0, x, q) == pytest.approx(poisson_oracle.twisted_rate(), rel=1e-12)


def test_acceptance_above_one_is_rejected(poisson):
    twisted = build_twisted_model(poisson, _flat(1.5))
    with pytest.raises(InvariantViolationError):
        twisted.acceptance(0.0, np.array([0.0]), np.array([1.0]))


def test_twisted_jump_proposal(poisson, poisson_oracle, bm):
    twisted = build_twisted_model(poisson, poisson_oracle.value())
    rng = np.random.default_rng(3)
    draws = [twisted_jump_proposal(twisted, 0.0, [0.0], rng) for _ in range(4000)]
    accepted = [q for q in draws if q is not None]
    assert all(q[0] == 1.0 for q in accepted)
    rate = len(accepted) / len(draws)
    p = 0.5 * math.exp(-1.0)
    assert abs(rate - p) < 4 * math.sqrt(p * (1 - p) / len(draws))

    with pytest.raises(ValueError):
        twisted_jump_proposal(build_twisted_model(bm, constant_value(1.0)), 0.0, [0.0], rng)


def test_twisted_gaussian_terminal_law(bm, gaussian_oracle, seed, grid):
    """X_T ~ N(0, 1/2) under Q*"""
    twisted = build_twisted_model(bm, gaussian_oracle.value())
    bundle = simulate_twisted(twisted, grid, 20000, seed, record=False)
    x = bundle.terminal[:, 0]
    var = gaussian_oracle.twisted_terminal_var()
    assert abs(np.mean(x)) < 4 * math.sqrt(var / x.size)
    assert abs(np.var(x, ddof=1) - var) < 4 * var * math.sqrt(2.0 / x.size) + grid.dt


def test_twisted_poisson_rate(poisson, poisson_oracle, seed):
    """Mean accepted jumps lam e^{-c} T = 1"""
    grid = TimeGrid(horizon=1.0, n_steps=100)
    twisted = build_twisted_model(poisson, poisson_oracle.value())
    bundle = simulate_twisted(twisted, grid, 20000, seed, record=False)
    counts = bundle.jump_counts.astype(float)
    mean = poisson_oracle.twisted_mean_jumps()
    assert abs(np.mean(counts) - mean) < 4 * math.sqrt(mean / counts.size)


def test_sample_initial_point_mass(bm, gaussian_oracle):
    twisted = build_twisted_model(bm, gaussian_oracle.value())
    x = sample_initial_twisted(twisted, np.random.default_rng(0))
    assert np.array_equal(x, [0.0])


def test_sample_initial_gaussian(gaussian_oracle):
    """mu = N(0, 1) tilted by v(0, x) ~ exp(-x^2 / 4) is N(0, 2/3)"""
    model = build_model("bm", initial="gaussian", initial_std=1.0)
    twisted = build_twisted_model(model, gaussian_oracle.value())
    rng = np.random.default_rng(11)
    x = np.array([sample_initial_twisted(twisted, rng)[0] for _ in range(20000)])
    var = 2.0 / 3.0
    assert abs(np.mean(x)) < 4 * math.sqrt(var / x.size)
    assert abs(np.var(x, ddof=1) - var) < 4 * var * math.sqrt(2.0 / x.size)


def test_sample_initial_gives_up(monkeypatch):
    monkeypatch.setattr(settings, "max_initial_proposals", 5)
    model = build_model("bm", initial="gaussian")
    twisted = build_twisted_model(model, _flat(1e-300))
    with pytest.raises(DegenerateTwistError):
        sample_initial_twisted(twisted, np.random.default_rng(0))


def test_flooded_jump_envelope_is_degenerate(poisson, seed):
    """v at its floor makes lambda / v propose about 1e11 jumps per step"""
    twisted = build_twisted_model(poisson, _flat(1e-12))
    with pytest.raises(DegenerateTwistError, match="proposals per step"):
        simulate_twisted(twisted, TimeGrid(horizon=1.0, n_steps=10), 5, seed)


@pytest.mark.parametrize("t", [1.0, 1.5])
def test_gradient_needs_t_before_horizon(bm, gaussian_oracle, t):
    with pytest.raises(ValueError, match="horizon"):
        generalized_gradient(gaussian_oracle.value(), bm, t, [1.0])
    with pytest.raises(ValueError):
        generalized_gradient(_flat(0.5), bm, t, [1.0], horizon=1.0)


def test_dump_twisted_drift(tmp_path, bm, gaussian_oracle):
    twisted = build_twisted_model(bm, gaussian_oracle.value())
    out = dump_twisted_drift(twisted, [0.0, 1.0], [[-1.0], [1.0]], tmp_path / "drift.csv")
    with open(out, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["t", "x_1", "bstar_1"]
    assert len(rows) == 5
    t, x, b = (float(c) for c in rows[2])
    assert (t, x) == (0.0, 1.0)
    assert b == pytest.approx(-0.5)
    # at the horizon s = 1 so b* = -x
    assert float(rows[4][2]) == pytest.approx(-1.0)
