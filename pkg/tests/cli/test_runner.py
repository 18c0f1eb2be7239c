import json

import portalocker
import pytest

from expotwist.cli import main
from expotwist.config import settings
from expotwist.core.errors import ConfigError, RunLockedError
from expotwist.core.utils import git_blob_hash
from expotwist.schemas.run_config import load_config, parse_config
from expotwist.services import experiment
from expotwist.services.experiment import (
    EXIT_CHECK_FAILED,
    EXIT_CONFIG_ERROR,
    EXIT_PASS,
    EXIT_RUNTIME_ERROR,
    LOCK_NAME,
    check,
    run_experiment,
)

NULL_CONFIG = """\
name = "null"

[model]
family = "bm"
sigma = 1.0

[grid]
n_steps = 20

[run]
n_paths = 500
seed = 7
"""

WRONG_DRIFT_CONFIG = """\
name = "wrong_drift"

[model]
family = "bm"

[cost]
terminal = "quadratic"
terminal_coef = 0.5

[grid]
n_steps = 50

[run]
n_paths = 2000
seed = 7
pipelines = ["checks"]
inject_wrong_drift = true

[checks]
pde = false
"""

POISSON_CONFIG = """\
name = "poisson"

[model]
family = "poisson"
rate = 2.0

[cost]
terminal = "linear"
terminal_coef = 0.6931471805599453

[grid]
n_steps = 50

[run]
n_paths = 2000
seed = 11
pipelines = ["value", "twist", "control"]
"""

MEANFIELD_CONFIG = """\
name = "meanfield"

[model]
family = "bm"

[cost]
terminal = "quadratic"
terminal_coef = 0.5

[grid]
n_steps = 10

[run]
n_paths = 1000
pipelines = ["meanfield"]

[meanfield]
objective = "{objective}"
max_iter = {max_iter}
tol = {tol}
"""


def _config(text, tmp_path, name="run"):
    config = parse_config(text)
    run = config.run.model_copy(update={"output_dir": str(tmp_path / name)})
    return config.model_copy(update={"run": run})


# --- parsing ---

def test_minimal_config_fills_defaults():
    config = parse_config(NULL_CONFIG)
    assert config.grid.horizon == 1.0
    assert config.run.stream == 0
    assert config.run.pipelines == ["value", "twist", "reweight", "control", "checks"]
    assert config.checks.n_bins == 10
    assert config.model.build().family == "bm"
    assert config.cost.build().is_zero


def test_seed_defaults_to_settings():
    config = parse_config(NULL_CONFIG.replace("seed = 7\n", ""))
    assert config.run.seed == settings.default_seed


def test_unknown_key_reports_key_and_line():
    text = NULL_CONFIG.replace("sigma = 1.0", "sigm = 1.0")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == "model.sigm"
    assert info.value.line == 5
    assert "unknown key 'model.sigm'" in str(info.value)


@pytest.mark.parametrize("text, key, line", [
    (NULL_CONFIG.replace("n_paths = 500", "n_paths = -3"), "run.n_paths", 11),
    (WRONG_DRIFT_CONFIG.replace("terminal_coef = 0.5", "terminal_coef = -0.5"), "cost.terminal_coef", 8),
    (WRONG_DRIFT_CONFIG.replace('terminal = "quadratic"', 'running_coef = -1.0\nterminal = "quadratic"'),
     "cost.running_coef", 7),
    (MEANFIELD_CONFIG.format(objective="linear", max_iter=30, tol=1e-3) + "slope = -1.0\n", "meanfield.slope", 21),
    (MEANFIELD_CONFIG.format(objective="quadratic", max_iter=30, tol=1e-3) + "curvature = -1.0\n",
     "meanfield.curvature", 21),
])
def test_invalid_value(text, key, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key
    assert info.value.line == line


def test_missing_section():
    with pytest.raises(ConfigError, match="missing required key 'run'"):
        parse_config('[model]\nfamily = "bm"\n')


def test_family_specific_parameters():
    with pytest.raises(ConfigError):
        parse_config(NULL_CONFIG.replace("sigma = 1.0", "rate = 1.0"))
    with pytest.raises(ConfigError):
        parse_config(POISSON_CONFIG.replace("rate = 2.0\n", ""))


def test_malformed_toml():
    with pytest.raises(ConfigError) as info:
        parse_config("[model\nfamily = 1\n")
    assert info.value.line == 1


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


# --- runs ---

def test_null_run_passes(tmp_path):
    outcome = run_experiment(_config(NULL_CONFIG, tmp_path))
    assert outcome.exit_code == EXIT_PASS, [r for r in outcome.results if not r.passed]
    names = {r.name for r in outcome.results}
    assert {"model_valid", "null_twist_identity", "variational_gap", "martingale_residual"} <= names

    out = outcome.output_dir
    for name in ("entropy.csv", "ranking.csv", "martingale.csv", "summary.csv", "summary.md", "manifest.json"):
        assert (out / name).exists(), name
    assert not (out / LOCK_NAME).exists()

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7
    assert manifest["exit_code"] == 0
    assert manifest["config"]["run"]["n_paths"] == 500
    assert manifest["files"]["entropy.csv"] == git_blob_hash(out / "entropy.csv")
    assert "Exit code: 0" in (out / "summary.md").read_text()


def test_runs_are_reproducible(tmp_path):
    first = run_experiment(_config(NULL_CONFIG, tmp_path, "a"), pipelines=["reweight", "checks"])
    second = run_experiment(_config(NULL_CONFIG, tmp_path, "b"), pipelines=["reweight", "checks"])
    for name in ("entropy.csv", "martingale.csv", "summary.csv"):
        assert (first.output_dir / name).read_bytes() == (second.output_dir / name).read_bytes()
    assert first.files == second.files


def test_wrong_drift_is_caught(tmp_path):
    outcome = run_experiment(_config(WRONG_DRIFT_CONFIG, tmp_path))
    assert outcome.exit_code == EXIT_CHECK_FAILED
    failed = [r.name for r in outcome.results if not r.passed]
    assert failed == ["martingale_residual"]


def test_jump_model_run(tmp_path):
    outcome = run_experiment(_config(POISSON_CONFIG, tmp_path))
    assert outcome.exit_code == EXIT_PASS, [r for r in outcome.results if not r.passed]
    skipped = [r for r in outcome.results if r.pipeline == "control"]
    assert len(skipped) == 1 and "skipped" in skipped[0].detail


def test_meanfield_run(tmp_path):
    text = MEANFIELD_CONFIG.format(objective="linear", max_iter=30, tol=1e-3)
    outcome = run_experiment(_config(text, tmp_path))
    assert outcome.exit_code == EXIT_PASS
    c_star = next(r for r in outcome.results if r.name == "c_star")
    assert c_star.value == 1.0
    assert (outcome.output_dir / "meanfield_trace.csv").exists()


def test_meanfield_non_convergence_is_a_runtime_error(tmp_path):
    text = MEANFIELD_CONFIG.format(objective="quadratic", max_iter=1, tol=1e-12)
    outcome = run_experiment(_config(text, tmp_path))
    assert outcome.exit_code == EXIT_RUNTIME_ERROR
    assert outcome.errors and outcome.errors[0].startswith("meanfield: NonConvergenceError")
    lines = (outcome.output_dir / "meanfield_trace.csv").read_text().splitlines()
    assert lines[0] == "iter,c,m,objective,entropy"
    assert len(lines) == 2


def test_negative_meanfield_multiplier_is_a_runtime_error(tmp_path):
    """F' < 0 at E_P[phi] makes c_0 negative; the run still writes its summary"""
    config = _config(MEANFIELD_CONFIG.format(objective="quadratic", max_iter=30, tol=1e-3), tmp_path)
    config = config.model_copy(update={"meanfield": config.meanfield.model_copy(update={"curvature": -1.0})})
    outcome = run_experiment(config)
    assert outcome.exit_code == EXIT_RUNTIME_ERROR
    assert outcome.errors[0].startswith("meanfield: InvariantViolationError")

    out = outcome.output_dir
    assert "Exit code: 3" in (out / "summary.md").read_text()
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == EXIT_RUNTIME_ERROR
    assert "pipeline_error" in (out / "summary.csv").read_text()


def test_precondition_error_in_a_pipeline_is_a_runtime_error(tmp_path, monkeypatch):
    def rejects(*args, **kwargs):
        raise ValueError("n_paths too small")

    monkeypatch.setattr(experiment, "fixed_point_solve", rejects)
    outcome = run_experiment(_config(MEANFIELD_CONFIG.format(objective="linear", max_iter=30, tol=1e-3), tmp_path))
    assert outcome.exit_code == EXIT_RUNTIME_ERROR
    assert outcome.errors == ["meanfield: ValueError: n_paths too small"]
    assert (outcome.output_dir / "summary.md").exists()


def test_check_runs_invariant_suites_only(tmp_path):
    outcome = check(_config(NULL_CONFIG, tmp_path))
    pipelines = {r.pipeline for r in outcome.results}
    assert pipelines == {"value", "reweight", "checks"}


def test_locked_output_directory(tmp_path):
    config = _config(NULL_CONFIG, tmp_path)
    out = tmp_path / "run"
    out.mkdir()
    with open(out / LOCK_NAME, "w") as handle:
        portalocker.lock(handle, portalocker.LOCK_EX | portalocker.LOCK_NB)
        with pytest.raises(RunLockedError):
            run_experiment(config)


# --- command line ---

def _write(tmp_path, text, name="config.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_cli_run(tmp_path, capsys):
    path = _write(tmp_path, NULL_CONFIG)
    code = main(["--no-log-file", "--log-level", "WARNING", "run", str(path),
                 "--output-dir", str(tmp_path / "out"), "--seed", "3"])
    assert code == EXIT_PASS
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert "checks passed" in capsys.readouterr().out


def test_cli_config_error(tmp_path):
    path = _write(tmp_path, NULL_CONFIG.replace("sigma", "sigm"))
    assert main(["--no-log-file", "--log-level", "ERROR", "run", str(path)]) == EXIT_CONFIG_ERROR
    assert main(["--no-log-file", "--log-level", "ERROR", "check", str(tmp_path / "missing.toml")]) == EXIT_CONFIG_ERROR


def test_cli_failed_check(tmp_path, capsys):
    path = _write(tmp_path, WRONG_DRIFT_CONFIG)
    code = main(["--no-log-file", "--log-level", "ERROR", "run", str(path), "--output-dir", str(tmp_path / "out")])
    assert code == EXIT_CHECK_FAILED
    assert "FAIL checks/martingale_residual" in capsys.readouterr().err


def test_cli_oracle(capsys):
    assert main(["--no-log-file", "--log-level", "ERROR", "oracle", "gaussian-quadratic"]) == EXIT_PASS
    table = dict(line.split(",") for line in capsys.readouterr().out.splitlines())
    assert float(table["minus_log_Z"]) == pytest.approx(0.34657359027997264)
    assert float(table["J_zero_control"]) == 0.5
    assert float(table["twisted_drift_t0_x1"]) == pytest.approx(-0.5)


def test_cli_oracle_meanfield(capsys):
    main(["--no-log-file", "--log-level", "ERROR", "oracle", "meanfield-quadratic"])
    table = dict(line.split(",") for line in capsys.readouterr().out.splitlines())
    assert float(table["c_star"]) == pytest.approx(float(table["closed_form_c_star"]), rel=1e-10)
