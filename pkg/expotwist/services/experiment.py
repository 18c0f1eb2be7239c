"""Config-driven experiment runs.

A run resolves the value source, then executes the enabled pipelines in a
fixed order (value, twist, reweight, control, checks, meanfield). Every
pipeline appends CheckResult rows; a pipeline that raises is recorded as a
failed row and the others still run. Outputs land in one directory guarded
by an exclusive lock.
"""

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import portalocker

from expotwist.config import settings
from expotwist.core.errors import ConfigError, ExpoTwistError, NonConvergenceError, RunLockedError
from expotwist.core.oracles import GaussianQuadraticOracle, PoissonLinearOracle, analytic_value, resolve_oracle
from expotwist.core.rng import SeedSpec
from expotwist.core.templates import render
from expotwist.core.utils import git_blob_hash, sha256_text
from expotwist.schemas.functions import ControlPolicy, coordinate_power, identity, zero_policy
from expotwist.schemas.reports import CheckResult, EntropyReport, MeanFieldResult
from expotwist.schemas.run_config import PIPELINES, RunConfig
from expotwist.schemas.value import AnalyticValue, ValueSource
from expotwist.services import reporting
from expotwist.services.control_eval import compare_controls, entropy_from_control, optimal_policy
from expotwist.services.feynman_kac import (
    RunningCost,
    ValueSurface,
    build_value_surface,
    default_box,
    dump_surface,
    initial_normalizer,
    value_martingale_check,
)
from expotwist.services.generator_check import carre_du_champ, integrability_probe, martingale_residual, pde_residual
from expotwist.services.girsanov import reweight, variational_report, weighted_expectation
from expotwist.services.meanfield_solver import fixed_point_solve, linear_objective, quadratic_objective
from expotwist.services.model_core import default_probes, validate_model
from expotwist.services.path_sampler import PathBundle, dump_paths, sample_paths
from expotwist.services.twist_engine import TwistedModel, build_twisted_model, dump_twisted_drift, simulate_twisted

EXIT_PASS = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3

LOCK_NAME = ".run.lock"


@dataclass
class RunOutcome:
    exit_code: int
    output_dir: Path
    results: List[CheckResult] = field(default_factory=list)
    files: Dict[str, str] = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.exit_code == EXIT_PASS


def _stat_check(pipeline: str, name: str, estimate: float, stderr: float, reference: float,
                k: float, allowance: float = 0.0) -> CheckResult:
    """|estimate - reference| <= k * stderr + allowance."""
    tolerance = k * stderr + allowance + 1e-12 * max(1.0, abs(reference))
    return CheckResult(pipeline=pipeline, name=name, passed=abs(estimate - reference) <= tolerance,
                       value=estimate, reference=reference, tolerance=tolerance)


@contextmanager
def _run_lock(output_dir: Path):
    output_dir.mkdir(parents=True, exist_ok=True)
    lock_path = output_dir / LOCK_NAME
    handle = open(lock_path, "w")
    try:
        portalocker.lock(handle, portalocker.LOCK_EX | portalocker.LOCK_NB)
    except portalocker.exceptions.LockException as e:
        handle.close()
        raise RunLockedError(f"run directory {output_dir} is locked by another process") from e
    try:
        yield
    finally:
        portalocker.unlock(handle)
        handle.close()
        lock_path.unlink(missing_ok=True)


@contextmanager
def _worker_override(workers: int):
    previous = settings.workers
    settings.workers = workers
    try:
        yield
    finally:
        settings.workers = previous


class ExperimentRunner:
    def __init__(self, config: RunConfig, config_text: Optional[str] = None):
        self.config = config
        self.config_text = config_text
        self.logger = logging.getLogger(__name__)

        self.model = config.model.build()
        self.cost = config.cost.build()
        self.grid = config.grid.build()
        self.seed = SeedSpec(master=config.run.seed, stream=config.run.stream)
        self.n_paths = config.run.n_paths
        self.k = config.checks.threshold
        self.oracle = resolve_oracle(self.model, self.cost, self.grid)
        self.output_dir = config.output_dir

        self.results: List[CheckResult] = []
        self.errors: List[str] = []
        self.files: List[Path] = []

        self._value: Optional[ValueSource] = None
        self._twisted: Optional[TwistedModel] = None
        self._twisted_bundle: Optional[PathBundle] = None
        self._entropy: Optional[EntropyReport] = None

    # --- shared state ---

    @property
    def value(self) -> ValueSource:
        if self._value is None:
            self._value = self._resolve_value()
        return self._value

    @property
    def twisted(self) -> TwistedModel:
        if self._twisted is None:
            self._twisted = build_twisted_model(self.model, self.value)
        return self._twisted

    def _resolve_value(self) -> ValueSource:
        section = self.config.surface
        if section.source in ("auto", "analytic"):
            value = analytic_value(self.model, self.cost, self.grid)
            if value is not None:
                self.logger.info(f"Using closed-form value function ({value.label})")
                return value
            if section.source == "analytic":
                raise ConfigError("surface.source = 'analytic' but the model/cost pair has no closed-form value",
                                  key="surface.source")

        box = default_box(self.model, self.grid, section.box_width)
        surface = build_value_surface(self.model, self.cost, self.grid, box=box,
                                      nodes_per_axis=section.nodes_per_axis, n_sub=section.n_sub,
                                      seed=self.seed, n_time_nodes=section.n_time_nodes)
        self._write(dump_surface(surface, self.output_dir / "surface.csv"))
        return surface

    def _write(self, path: Path) -> Path:
        self.files.append(Path(path))
        return path

    def _record(self, *results: CheckResult):
        for result in results:
            self.results.append(result)
            level = logging.INFO if result.passed else logging.WARNING
            self.logger.log(level, f"[{result.pipeline}] {result.name}: {'pass' if result.passed else 'FAIL'}"
                                   f"{f' ({result.detail})' if result.detail else ''}")

    # --- pipelines ---

    def run_value(self):
        validation = validate_model(self.model, self.cost, self.grid, default_probes(self.model, self.grid))
        self._record(CheckResult(pipeline="value", name="model_valid", passed=validation.valid,
                                 detail="; ".join(sorted(set(validation.messages())))))

        value = self.value
        z, z_se = initial_normalizer(value, self.model, self.n_paths, self.seed, self.grid.start)
        if self.oracle is not None:
            self._record(_stat_check("value", "initial_normalizer_Z", z, z_se, self.oracle.z(), self.k))
        else:
            self._record(CheckResult(pipeline="value", name="initial_normalizer_Z", passed=0.0 < z <= 1.0,
                                     value=z, detail=f"stderr {z_se:.3g}"))

        if self.config.checks.value_martingale:
            report = value_martingale_check(value, self.model, self.cost, self.grid, self.n_paths,
                                            self.seed.with_stream(self.seed.stream + 1), threshold=self.k)
            self._write(reporting.write_report(reporting.residual_rows(report),
                                               self.output_dir / "value_martingale.csv", reporting.RESIDUAL_COLUMNS))
            self._record(CheckResult(pipeline="value", name="value_martingale", passed=report.passed,
                                     value=report.max_abs_z, tolerance=report.threshold,
                                     detail="; ".join(report.notes)))

    def run_twist(self):
        twisted = self.twisted
        bundle = simulate_twisted(twisted, self.grid, self.n_paths, self.seed, record=False)
        self._twisted_bundle = bundle
        keep = ~bundle.diverged

        lo, hi = default_box(self.model, self.grid, 2.0)
        points = np.linspace(lo, hi, 21)
        times = self.grid.times[np.unique(np.linspace(0, self.grid.n_steps - 1, 5).astype(int))]
        self._write(dump_twisted_drift(twisted, times, points, self.output_dir / "twisted_drift.csv"))

        if self.config.run.dump_paths:
            n = min(self.config.run.dump_paths, self.n_paths)
            sample = simulate_twisted(twisted, self.grid, n, self.seed, record=True)
            self._write(dump_paths(sample, self.output_dir / "twisted_paths.csv"))

        if self.cost.is_zero:
            reference = sample_paths(self.model, self.grid, self.n_paths, self.seed, record=False)
            identical = (np.array_equal(reference.terminal, bundle.terminal, equal_nan=True)
                         and np.array_equal(reference.jump_counts, bundle.jump_counts))
            self._record(CheckResult(pipeline="twist", name="null_twist_identity", passed=identical,
                                     detail="twisted and reference terminal states bit-identical"
                                     if identical else "twisted simulation differs from reference"))

        x_T = bundle.terminal[keep, 0]
        if isinstance(self.oracle, GaussianQuadraticOracle):
            n = x_T.size
            mean = float(np.mean(x_T))
            var = float(np.var(x_T, ddof=1))
            var_se = var * math.sqrt(2.0 / (n - 1))
            allowance = self.grid.dt * max(1.0, self.oracle.twisted_terminal_var())
            self._record(
                _stat_check("twist", "twisted_mean_XT", mean, math.sqrt(var / n),
                            self.oracle.twisted_terminal_mean(), self.k, allowance),
                _stat_check("twist", "twisted_var_XT", var, var_se, self.oracle.twisted_terminal_var(),
                            self.k, allowance),
            )
        elif isinstance(self.oracle, PoissonLinearOracle):
            counts = bundle.jump_counts[keep].astype(float)
            self._record(_stat_check("twist", "twisted_mean_jumps", float(np.mean(counts)),
                                     float(np.std(counts, ddof=1) / math.sqrt(counts.size)),
                                     self.oracle.twisted_mean_jumps(), self.k))

    def run_reweight(self):
        acc = RunningCost(self.cost, self.n_paths, self.grid)
        bundle = sample_paths(self.model, self.grid, self.n_paths, self.seed, observer=acc, record=False)
        ensemble = reweight(bundle, self.cost, running=acc.total)
        report = variational_report(ensemble)
        self._entropy = report
        self._write(reporting.write_report(reporting.entropy_rows(report), self.output_dir / "entropy.csv",
                                           reporting.ENTROPY_COLUMNS))

        scale = max(1.0, abs(report.minus_log_z), abs(report.mean_phi))
        self._record(CheckResult(pipeline="reweight", name="variational_gap", passed=abs(report.gap) <= 1e-10 * scale,
                                 value=report.gap, reference=0.0, tolerance=1e-10 * scale,
                                 detail=f"ESS {report.ess:.1f} of {report.n_paths}"))

        if self.oracle is not None:
            self._record(
                _stat_check("reweight", "minus_log_Z", report.minus_log_z, report.minus_log_z_stderr,
                            self.oracle.minus_log_z(), self.k),
                _stat_check("reweight", "mean_phi_Qstar", report.mean_phi, report.mean_phi_stderr,
                            self.oracle.mean_phi_qstar(), self.k),
                _stat_check("reweight", "entropy", report.entropy, report.entropy_stderr,
                            self.oracle.entropy(), self.k),
            )

        if self._twisted_bundle is not None:
            twisted = self._twisted_bundle
            x_T = twisted.terminal[~twisted.diverged, 0]
            for power in (1, 2):
                weighted, w_se = weighted_expectation(ensemble, bundle.terminal[:, 0] ** power)
                direct = float(np.mean(x_T ** power))
                d_se = float(np.std(x_T ** power, ddof=1) / math.sqrt(x_T.size))
                self._record(_stat_check("reweight", f"twist_vs_reweight_moment{power}", direct,
                                         math.hypot(w_se, d_se), weighted, self.k, self.grid.dt))

    def _policies(self) -> List[ControlPolicy]:
        section = self.config.control
        policies: List[ControlPolicy] = []
        optimal = optimal_policy(self.twisted)
        for name in section.policies:
            policies.append(optimal if name == "optimal" else zero_policy())
        for s in section.scales:
            policies.append(ControlPolicy(name=f"{s:g}*u*", feedback=lambda t, X, s=s: s * optimal.feedback(t, X)))
        return policies

    def run_control(self):
        if self.model.jump is not None:
            self._record(CheckResult(pipeline="control", name="control_ranking", passed=True,
                                     detail="skipped: control evaluation covers diffusions only"))
            return
        minus_log_z = self._entropy.minus_log_z if self._entropy is not None else None
        if minus_log_z is None and self.oracle is not None:
            minus_log_z = self.oracle.minus_log_z()

        report = compare_controls(self.model, self.cost, self._policies(), self.grid, self.n_paths,
                                  self.seed, reference="u*" if "optimal" in self.config.control.policies else None,
                                  minus_log_z=minus_log_z)
        self._write(reporting.write_report(reporting.ranking_rows(report), self.output_dir / "ranking.csv",
                                           reporting.RANKING_COLUMNS))
        self._record(CheckResult(pipeline="control", name="optimal_not_beaten", passed=not report.red_flags,
                                 detail="; ".join(report.red_flags)))

        if isinstance(self.oracle, GaussianQuadraticOracle):
            names = {row.policy_name for row in report.rows}
            allowance = self.grid.dt
            if "u*" in names:
                row = report.by_name("u*")
                self._record(_stat_check("control", "J_optimal", row.J, row.stderr,
                                         self.oracle.minus_log_z(), self.k, allowance))
            if "zero" in names:
                row = report.by_name("zero")
                self._record(_stat_check("control", "J_zero", row.J, row.stderr,
                                         self.oracle.uncontrolled_cost(), self.k, allowance))

        if self.model.initial_law.is_point_mass:
            self._entropy_cross_check()

    def _entropy_cross_check(self):
        """Control-side entropy E_Q*[int |u*|^2 / 2 dt] against the reweighting one (or the oracle)."""
        H, se = entropy_from_control(self.twisted, self.grid, self.n_paths, self.seed.with_stream(self.seed.stream + 4))
        if self._entropy is not None:
            reference, ref_se = self._entropy.entropy, self._entropy.entropy_stderr
        elif self.oracle is not None:
            reference, ref_se = self.oracle.entropy(), 0.0
        else:
            return
        self._record(_stat_check("control", "entropy_from_control", H, math.hypot(se, ref_se), reference,
                                 self.k, self.grid.dt))

    def run_checks(self):
        section = self.config.checks
        twisted = self.twisted
        phi = identity(0, self.model.dim) if section.test_function == "x" else coordinate_power(2)

        report = martingale_residual(twisted, phi, self.grid, self.n_paths, self.seed.with_stream(self.seed.stream + 2),
                                     n_bins=section.n_bins, inject_wrong_drift=self.config.run.inject_wrong_drift,
                                     threshold=section.threshold)
        self._write(reporting.write_report(reporting.residual_rows(report), self.output_dir / "martingale.csv",
                                           reporting.RESIDUAL_COLUMNS))
        self._record(CheckResult(pipeline="checks", name="martingale_residual", passed=report.passed,
                                 value=report.max_abs_z, tolerance=report.threshold,
                                 detail="; ".join(report.notes)))

        x0 = np.zeros((1, self.model.dim))
        if self.model.initial_law.is_point_mass:
            x0 = np.asarray(self.model.initial_law.point, dtype=float)[None, :]
        gamma = carre_du_champ(self.model, phi, phi, self.grid.start, x0[0])
        if self.model.jump is None and section.test_function == "x":
            expected = float(self.model.diffusion_matrix(self.grid.start, x0)[0, 0, 0])
            self._record(_stat_check("checks", "carre_du_champ", gamma, 0.0, expected, 0.0, 1e-6))

        if section.pde:
            self._run_pde()

        probe = integrability_probe(twisted, self.grid, self.n_paths, section.integrability_p,
                                    self.seed.with_stream(self.seed.stream + 3))
        self._record(CheckResult(pipeline="checks", name="integrability_stable", passed=probe.stable,
                                 value=probe.estimate, reference=probe.estimate_half, tolerance=0.1,
                                 detail=f"relative drift {probe.relative_drift:.3g}"))
        if isinstance(self.oracle, GaussianQuadraticOracle) and (self.oracle.x0 == 0.0 or self.model.dim == 1):
            self._record(_stat_check("checks", "integrability", probe.estimate, probe.stderr,
                                     self.oracle.integrability(section.integrability_p, self.grid), self.k,
                                     self.grid.dt))

    def _run_pde(self):
        value = self.value
        if isinstance(value, ValueSurface):
            report = pde_residual(value, self.model, self.cost, grid=self.grid)
        elif isinstance(value, AnalyticValue):
            T, t0 = self.grid.horizon, self.grid.start
            lo, hi = default_box(self.model, self.grid, 1.0)
            nodes = [(t0 + f * (T - t0), x) for f in (0.25, 0.5, 0.75) for x in np.linspace(lo, hi, 5)]
            report = pde_residual(value, self.model, self.cost, nodes=nodes)
        else:
            return
        self._write(reporting.write_report(reporting.node_rows(report), self.output_dir / "pde_residual.csv",
                                           reporting.NODE_COLUMNS))
        self._record(CheckResult(pipeline="checks", name="pde_residual", passed=report.passed,
                                 value=report.max_abs_residual, detail="; ".join(report.notes)))

    def run_meanfield(self):
        section = self.config.meanfield
        options = dict(theta=section.theta, tol=section.tol, max_iter=section.max_iter)
        if section.objective == "linear":
            problem = linear_objective(self.cost, section.slope, **options)
        else:
            problem = quadratic_objective(self.cost, section.curvature, **options)

        path = self.output_dir / "meanfield_trace.csv"
        try:
            result = fixed_point_solve(problem, self.model, self.grid, self.n_paths, self.seed)
        except NonConvergenceError as e:
            self._write(reporting.write_report(e.trace, path, reporting.TRACE_COLUMNS))
            raise
        self._write(reporting.write_report(reporting.trace_rows(result), path, reporting.TRACE_COLUMNS))
        self._record(CheckResult(pipeline="meanfield", name="fixed_point_converged", passed=result.converged,
                                 value=result.c_star, detail=f"{result.iterations} iteration(s)"))
        self._meanfield_oracle(problem.name, result, section.objective, section.curvature, section.slope, section.tol)

    def _meanfield_oracle(self, name: str, result: MeanFieldResult, objective: str, curvature: float,
                          slope: float, tol: float):
        if objective == "linear":
            reference = slope
            tolerance = tol
        elif isinstance(self.oracle, GaussianQuadraticOracle):
            reference = self.oracle.meanfield_multiplier(curvature)
            tolerance = max(tol, self.k * abs(curvature) * result.m_stderr)
        else:
            return
        self._record(CheckResult(pipeline="meanfield", name="c_star", value=result.c_star, reference=reference,
                                 tolerance=tolerance, passed=abs(result.c_star - reference) <= tolerance,
                                 detail=name))

    # --- orchestration ---

    def execute(self, pipelines: Sequence[str]) -> RunOutcome:
        runtime_error = False
        with _run_lock(self.output_dir), _worker_override(self.config.run.workers):
            self.logger.info(f"Run '{self.config.name}' ({self.model.family}, N={self.n_paths}, "
                             f"seed={self.seed.master}) -> {self.output_dir}")
            for name in PIPELINES:
                if name not in pipelines:
                    continue
                self.logger.info(f"Pipeline {name}")
                try:
                    getattr(self, f"run_{name}")()
                except ConfigError:
                    raise
                except (ExpoTwistError, ValueError) as e:
                    runtime_error = True
                    message = f"{type(e).__name__}: {e}"
                    self.errors.append(f"{name}: {message}")
                    self.logger.error(f"Pipeline {name} failed: {message}", exc_info=True)
                    self._record(CheckResult(pipeline=name, name="pipeline_error", passed=False, detail=message))

            if runtime_error:
                exit_code = EXIT_RUNTIME_ERROR
            elif all(r.passed for r in self.results):
                exit_code = EXIT_PASS
            else:
                exit_code = EXIT_CHECK_FAILED

            files = self._finish(pipelines, exit_code)
        self.logger.info(f"Run '{self.config.name}' finished with exit code {exit_code}")
        return RunOutcome(exit_code=exit_code, output_dir=self.output_dir, results=list(self.results),
                          files=files, errors=list(self.errors))

    def _finish(self, pipelines: Sequence[str], exit_code: int) -> Dict[str, str]:
        self._write(reporting.write_report(self.results, self.output_dir / "summary.csv", reporting.SUMMARY_COLUMNS))
        summary = render("summary.md.j2", config=self.config, results=self.results, errors=self.errors,
                         pipelines=[p for p in PIPELINES if p in pipelines], exit_code=exit_code,
                         n_failed=sum(not r.passed for r in self.results))
        summary_path = self.output_dir / "summary.md"
        summary_path.write_text(summary, encoding="utf-8")
        self._write(summary_path)

        files = {p.name: git_blob_hash(p) for p in sorted(set(self.files))}
        manifest = {
            "name": self.config.name,
            "version": settings.version,
            "seed": self.seed.master,
            "stream": self.seed.stream,
            "config": self.config.echo(),
            # hash of the source text when known, of the echoed config otherwise
            "config_sha256": sha256_text(self.config_text if self.config_text is not None
                                         else json.dumps(self.config.echo(), sort_keys=True)),
            "pipelines": [p for p in PIPELINES if p in pipelines],
            "exit_code": exit_code,
            "files": files,
        }
        (self.output_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                       encoding="utf-8")
        return files


def run_experiment(config: RunConfig, pipelines: Optional[Sequence[str]] = None,
                   config_text: Optional[str] = None) -> RunOutcome:
    """Run the configured pipelines; exit code 0 iff every recorded check passed."""
    return ExperimentRunner(config, config_text).execute(pipelines or config.run.pipelines)


def check(config: RunConfig, config_text: Optional[str] = None) -> RunOutcome:
    """Invariant suites only: value resolution, the reweighting identities and the generator checks."""
    return ExperimentRunner(config, config_text).execute(("value", "reweight", "checks"))
