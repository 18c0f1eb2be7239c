import logging
import math

import pytest

from expotwist.config import settings
from expotwist.core.families import build_cost, build_model, zero_cost
from expotwist.core.oracles import GaussianQuadraticOracle, PoissonLinearOracle
from expotwist.core.rng import SeedSpec
from expotwist.schemas.model import TimeGrid


# --- FIXTURE START ---
@pytest.fixture(scope="session", autouse=True)
def quiet_logging():
    """
    Keep the package logger on the console only; tests never write
    into storage/logs.
    """
    logger = logging.getLogger("expotwist")
    logger.handlers.clear()
    logger.setLevel(logging.WARNING)
    yield


@pytest.fixture(autouse=True)
def isolated_storage(tmp_path, monkeypatch):
    """Point every settings path into the test's temporary directory."""
    monkeypatch.setattr(settings, "output_dir", tmp_path / "runs")
    monkeypatch.setattr(settings, "log_dir", tmp_path / "logs")
    yield
# --- FIXTURE END ---


@pytest.fixture
def seed():
    return SeedSpec(master=20240917)


@pytest.fixture
def grid():
    return TimeGrid(horizon=1.0, n_steps=200)


# --- Gaussian quadratic benchmark: dX = dW, g(x) = x^2 / 2 ---
@pytest.fixture
def bm():
    return build_model("bm", dim=1, sigma=1.0, x0=0.0)


@pytest.fixture
def quadratic_cost():
    return build_cost(terminal="quadratic", terminal_coef=0.5)


@pytest.fixture
def gaussian_oracle():
    return GaussianQuadraticOracle(gamma=0.5, sigma=1.0, horizon=1.0)


# --- Poisson benchmark: rate 2 unit jumps, g(x) = ln 2 * x ---
@pytest.fixture
def poisson():
    return build_model("poisson", rate=2.0, jump_size=1.0)


@pytest.fixture
def linear_cost():
    return build_cost(terminal="linear", terminal_coef=math.log(2.0))


@pytest.fixture
def poisson_oracle():
    return PoissonLinearOracle(rate=2.0, coef=math.log(2.0), horizon=1.0)


@pytest.fixture
def null_cost():
    return zero_cost()
