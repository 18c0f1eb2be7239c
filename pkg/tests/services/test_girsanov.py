import math
from dataclasses import replace

import numpy as np
import pytest

from expotwist.core.errors import DegenerateEnsembleError, InternalConsistencyError
from expotwist.core.families import build_cost
from expotwist.schemas.model import TimeGrid
from expotwist.services.girsanov import (
    GAP_TOLERANCE,
    effective_sample_size,
    entropy_estimate,
    normalize_weights,
    path_cost,
    path_costs,
    reweight,
    tempered_weights,
    variational_objective,
    variational_report,
    weighted_expectation,
)
from expotwist.services.path_sampler import Path, sample_paths


def test_weights_have_mean_one():
    costs = np.random.default_rng(1).normal(size=500) * 3.0
    ensemble = normalize_weights(costs)
    assert math.fsum(ensemble.weights) / ensemble.n_paths == pytest.approx(1.0, abs=1e-12)
    assert ensemble.z_hat == pytest.approx(np.mean(np.exp(-costs)), rel=1e-12)


def test_large_costs_do_not_underflow():
    """Costs of 1e4 alone would give exp(-phi) == 0; the log-space path stays finite"""
    ensemble = normalize_weights([1e4, 1e4 + 1.0, 1e4 + 2.0])
    assert np.all(ensemble.weights > 0)
    assert ensemble.minus_log_z == pytest.approx(1e4 - math.log((1 + math.exp(-1) + math.exp(-2)) / 3))


def test_effective_sample_size_extremes():
    assert effective_sample_size(normalize_weights([0.0, 1000.0, 1000.0])) == pytest.approx(1.0)
    assert effective_sample_size(normalize_weights(np.full(50, 2.5))) == pytest.approx(50.0)


def test_normalize_weights_rejects_bad_input():
    with pytest.raises(ValueError):
        normalize_weights([])
    with pytest.raises(ValueError):
        normalize_weights([0.0, math.nan])


def test_reweight_with_nothing_retained(bm, quadratic_cost, seed):
    grid = TimeGrid(horizon=1.0, n_steps=5)
    bundle = sample_paths(bm, grid, 4, seed)
    bundle.diverged[:] = True
    with pytest.raises(DegenerateEnsembleError):
        reweight(bundle, quadratic_cost)


def test_variational_gap_is_algebraic():
    """-log Z_hat - (E[phi] + H) vanishes on any ensemble"""
    for scale in (0.1, 1.0, 20.0):
        costs = np.random.default_rng(7).exponential(scale, size=2000)
        report = variational_report(normalize_weights(costs))
        assert abs(report.gap) < GAP_TOLERANCE * max(1.0, abs(report.minus_log_z))
        assert 1.0 <= report.ess <= 2000.0


def test_variational_gap_tolerance_scales_with_cost_magnitude():
    costs = 1e6 + np.random.default_rng(3).exponential(1.0, size=2000)
    report = variational_report(normalize_weights(costs))
    assert abs(report.gap) < GAP_TOLERANCE * 1e6


def test_variational_gap_detects_inconsistent_normalizer():
    ensemble = normalize_weights(np.random.default_rng(3).exponential(1.0, size=2000))
    with pytest.raises(InternalConsistencyError, match="variational gap"):
        variational_report(replace(ensemble, log_z=ensemble.log_z + 1e-6))


def test_entropy_zero_for_uniform_weights():
    ensemble = normalize_weights(np.full(10, 0.7))
    assert entropy_estimate(ensemble) == pytest.approx(0.0, abs=1e-14)
    report = variational_report(ensemble)
    assert report.mean_phi == pytest.approx(0.7)
    assert report.minus_log_z == pytest.approx(0.7)


def test_weighted_expectation_of_constant():
    ensemble = normalize_weights(np.random.default_rng(3).normal(size=100))
    estimate, stderr = weighted_expectation(ensemble, 2.0)
    assert estimate == pytest.approx(2.0, rel=1e-14)
    assert stderr == pytest.approx(0.0, abs=1e-14)


def test_tempered_weights():
    costs = np.random.default_rng(5).normal(size=200)
    assert np.allclose(tempered_weights(costs, 0.0), 1.0)
    assert np.allclose(tempered_weights(costs, 1.0), normalize_weights(costs).weights)
    assert np.mean(tempered_weights(costs, 0.3)) == pytest.approx(1.0)


def test_variational_objective_minimized_by_twist():
    """Any other mean-one reweighting scores at least -log Z_hat"""
    costs = np.random.default_rng(9).normal(size=300)
    ensemble = normalize_weights(costs)
    best = variational_objective(costs, ensemble.weights)
    assert best == pytest.approx(ensemble.minus_log_z, abs=1e-12)
    assert variational_objective(costs, np.ones_like(costs)) >= best
    for beta in (0.0, 0.5, 1.5):
        assert variational_objective(costs, tempered_weights(costs, beta)) >= best - 1e-12


def test_variational_objective_preconditions():
    with pytest.raises(ValueError):
        variational_objective([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        variational_objective([1.0, 2.0], [2.5, -0.5])
    with pytest.raises(ValueError):
        variational_objective([1.0, 2.0], [1.0, 2.0])


def test_path_cost_left_endpoint_rule():
    grid = TimeGrid(horizon=1.0, n_steps=4)
    cost = build_cost(running="quadratic", running_coef=1.0, terminal="linear", terminal_coef=2.0)
    states = np.array([[0.0], [1.0], [1.0], [2.0], [3.0]])
    path = Path(times=grid.times, states=states)
    # (0 + 1 + 1 + 4) * 0.25 + 2 * 3
    assert path_cost(path, cost, grid) == pytest.approx(7.5, rel=1e-15)

    with pytest.raises(ValueError):
        path_cost(Path(times=grid.times, states=states[:3]), cost, grid)


def test_path_costs_match_single_path(bm, seed):
    grid = TimeGrid(horizon=1.0, n_steps=10)
    cost = build_cost(running="quadratic", running_coef=0.3, terminal="quadratic", terminal_coef=0.5)
    bundle = sample_paths(bm, grid, 20, seed)
    phi, retained = path_costs(bundle, cost)
    assert np.all(retained)
    for i in (0, 7, 19):
        assert phi[i] == pytest.approx(path_cost(bundle.path(i), cost, grid), rel=1e-12)


def test_gaussian_benchmark_reweighting(bm, quadratic_cost, gaussian_oracle, seed):
    """-log Z, E_Q*[phi] and H(Q*|P) within 4 standard errors of the closed forms"""
    grid = TimeGrid(horizon=1.0, n_steps=20)
    bundle = sample_paths(bm, grid, 20000, seed)
    report = variational_report(reweight(bundle, quadratic_cost))
    assert abs(report.minus_log_z - gaussian_oracle.minus_log_z()) < 4 * report.minus_log_z_stderr
    assert abs(report.mean_phi - gaussian_oracle.mean_phi_qstar()) < 4 * report.mean_phi_stderr
    assert abs(report.entropy - gaussian_oracle.entropy()) < 4 * report.entropy_stderr
    assert report.ess > 0.5 * 20000


def test_poisson_benchmark_reweighting(poisson, linear_cost, poisson_oracle, seed):
    grid = TimeGrid(horizon=1.0, n_steps=50)
    bundle = sample_paths(poisson, grid, 20000, seed)
    report = variational_report(reweight(bundle, linear_cost))
    assert abs(report.minus_log_z - poisson_oracle.minus_log_z()) < 4 * report.minus_log_z_stderr
    assert abs(report.mean_phi - poisson_oracle.mean_phi_qstar()) < 4 * report.mean_phi_stderr


def test_null_cost_gives_uniform_weights(bm, null_cost, seed):
    grid = TimeGrid(horizon=1.0, n_steps=5)
    report = variational_report(reweight(sample_paths(bm, grid, 100, seed), null_cost))
    assert report.minus_log_z == pytest.approx(0.0, abs=1e-14)
    assert report.entropy == pytest.approx(0.0, abs=1e-14)
    assert report.ess == pytest.approx(100.0)
