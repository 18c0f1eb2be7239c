"""Generator-level identities of the twist.

* carre du champ Gamma(phi, psi) = a(phi psi) - psi a(phi) - phi a(psi)
* twisted generator a^Q*(phi) = a(phi) with drift b + Gamma(v)/v and jump kernel
  reweighted by v(t, x + q) / v(t, x)
* martingale residual of phi(t, X_t) - int a^Q*(phi) under simulated Q*
* PDE residual a(v) - f v of a value source
* integrability of |Gamma(v)/v|^p along twisted paths
"""

import logging
import math
import threading
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from expotwist.config import settings
from expotwist.core.rng import SeedSpec
from expotwist.schemas.functions import TestFunction, numeric
from expotwist.schemas.model import CostSpec, ModelSpec, TimeGrid
from expotwist.schemas.reports import IntegrabilityReport, NodeResidual, ResidualReport, ResidualRow
from expotwist.schemas.value import AnalyticValue, ValueSource
from expotwist.services.feynman_kac import ValueSurface
from expotwist.services.model_core import apply_generator, as_batch, jump_nodes
from expotwist.services.path_sampler import sample_paths
from expotwist.services.twist_engine import TwistedModel, gamma_batch, sample_initial_twisted, simulate_twisted

logger = logging.getLogger(__name__)

Array = np.ndarray


def _scalar_or_batch(out: Array, x):
    return float(out[0]) if np.ndim(x) <= 1 else out


def carre_du_champ(model: ModelSpec, phi: TestFunction, psi: TestFunction, t: float, x,
                   fd_step: Optional[float] = None):
    X = as_batch(x)
    joint = apply_generator(model, phi.product(psi), t, X, fd_step=fd_step)
    a_phi = apply_generator(model, phi, t, X, fd_step=fd_step)
    a_psi = apply_generator(model, psi, t, X, fd_step=fd_step)
    return _scalar_or_batch(joint - psi(t, X) * a_phi - phi(t, X) * a_psi, x)


def _jump_tilt(twisted: TwistedModel):
    def weight(t: float, X: Array, shifted: Array) -> Array:
        n, m, d = shifted.shape
        v_shift = twisted.value.value(t, shifted.reshape(n * m, d)).reshape(n, m)
        return v_shift / twisted.v(t, X)[:, None]
    return weight


def twisted_generator_batch(twisted: TwistedModel, phi: TestFunction, t: float, X: Array,
                            fd_step: Optional[float] = None) -> Array:
    tilt = _jump_tilt(twisted) if twisted.base.jump is not None else None
    return apply_generator(twisted.base, phi, t, X, fd_step=fd_step, drift=twisted.drift(t, X), jump_weight=tilt)


def twisted_generator_apply(twisted: TwistedModel, phi: TestFunction, t: float, x,
                            fd_step: Optional[float] = None):
    """a^Q*(phi)(t, x)."""
    return _scalar_or_batch(twisted_generator_batch(twisted, phi, t, as_batch(x), fd_step), x)


# --- MARTINGALE RESIDUAL ---

class _BinnedIncrements:
    """Per-chunk accumulation of phi increments minus compensator, binned on X_k[0]."""

    def __init__(self, twisted: TwistedModel, phi: TestFunction, grid: TimeGrid, edges: Array,
                 n_paths: int, d: int, fd_step: Optional[float]):
        self.twisted = twisted
        self.phi = phi
        self.grid = grid
        self.edges = edges
        self.fd_step = fd_step
        self.n_bins = edges.size - 1
        self.prev_x0 = np.zeros(n_paths)
        self.prev_phi = np.zeros(n_paths)
        self.prev_comp = np.zeros(n_paths)
        self.partials: Dict[int, Array] = {}
        self.lock = threading.Lock()

    def __call__(self, k: int, t: float, X: Array, rows: slice):
        live = np.all(np.isfinite(X), axis=1)
        phi_now = np.where(live, self.phi(t, np.nan_to_num(X)), np.nan)
        if k > 0:
            dt = self.grid.dt
            r = phi_now - self.prev_phi[rows] - self.prev_comp[rows] * dt
            ok = np.isfinite(r)
            b = np.clip(np.searchsorted(self.edges, self.prev_x0[rows][ok], side="right") - 1, 0, self.n_bins - 1)
            r_ok = r[ok]
            stats = np.stack([
                np.bincount(b, minlength=self.n_bins).astype(float),
                np.bincount(b, weights=r_ok, minlength=self.n_bins),
                np.bincount(b, weights=r_ok * r_ok, minlength=self.n_bins),
                np.bincount(b, weights=np.abs(self.prev_comp[rows][ok]) * dt, minlength=self.n_bins),
            ])
            with self.lock:
                if rows.start in self.partials:
                    self.partials[rows.start] += stats
                else:
                    self.partials[rows.start] = stats
        if k < self.grid.n_steps:
            comp = twisted_generator_batch(self.twisted, self.phi, t, np.nan_to_num(X), self.fd_step)
            self.prev_comp[rows] = np.where(live, comp, np.nan)
            self.prev_phi[rows] = phi_now
            self.prev_x0[rows] = X[:, 0]

    def totals(self) -> Array:
        # fixed reduction order keeps results independent of thread scheduling
        out = np.zeros((4, self.n_bins))
        for key in sorted(self.partials):
            out += self.partials[key]
        return out


def _merge_sparse_bins(lo: List[float], hi: List[float], stats: Array, notes: List[str]):
    lo, hi = list(lo), list(hi)
    cols = [stats[:, j].copy() for j in range(stats.shape[1])]
    j = 0
    while len(cols) > 1 and j < len(cols):
        if cols[j][0] >= 2:
            j += 1
            continue
        other = j + 1 if j + 1 < len(cols) else j - 1
        a, b = sorted((j, other))
        notes.append(f"bin [{lo[j]:.6g}, {hi[j]:.6g}) had {int(cols[j][0])} sample(s), merged with neighbour")
        cols[a] = cols[a] + cols[b]
        hi[a] = hi[b]
        del cols[b], lo[b], hi[b]
        j = a
    return lo, hi, cols


def martingale_residual(twisted: TwistedModel, phi: TestFunction, grid: TimeGrid, n_paths: int, seed: SeedSpec,
                        n_bins: int = 10, inject_wrong_drift: bool = False, fd_step: Optional[float] = None,
                        threshold: Optional[float] = None, n_pilot: int = 1000) -> ResidualReport:
    """Binned means of phi(t_{k+1}, X_{k+1}) - phi(t_k, X_k) - a^Q*(phi)(t_k, X_k) dt under Q*.

    With ``inject_wrong_drift`` paths are simulated with the reference drift b
    while still compensated with a^Q*; the test should then fail.
    """
    if n_bins < 3:
        raise ValueError(f"n_bins must be >= 3, got {n_bins}")
    threshold = threshold or settings.residual_z_threshold
    model = twisted.base
    jump_rule = twisted if model.jump is not None else None
    drift = model.drift if inject_wrong_drift else twisted.drift

    def simulate(n: int, **kwargs):
        return sample_paths(model, grid, n, seed, drift_override=drift, jump_rule=jump_rule,
                            initial_sampler=lambda rng: sample_initial_twisted(twisted, rng, grid.start), **kwargs)

    # quantile edges from the first paths of the same seed
    pilot = simulate(min(n_pilot, n_paths))
    pooled = pilot.states[~pilot.diverged, :-1, 0].ravel()
    inner = np.unique(np.quantile(pooled, np.linspace(0.0, 1.0, n_bins + 1)[1:-1]))
    edges = np.concatenate([[-np.inf], inner, [np.inf]])

    acc = _BinnedIncrements(twisted, phi, grid, edges, n_paths, model.dim, fd_step)
    bundle = simulate(n_paths, observer=acc, record=False)
    stats = acc.totals()

    notes: List[str] = []
    if edges.size - 1 < n_bins:
        notes.append(f"{n_bins - edges.size + 1} duplicate quantile edge(s) dropped")
    lo, hi, cols = _merge_sparse_bins(edges[:-1].tolist(), edges[1:].tolist(), stats, notes)
    for note in notes:
        logger.warning(f"Martingale residual: {note}")

    rows = []
    C = settings.bias_constant
    dt = grid.dt
    for a, b, (count, s, ss, abs_comp) in zip(lo, hi, cols):
        n = int(count)
        if n == 0:
            continue
        mean = s / n
        var = max(ss - s * s / n, 0.0) / (n - 1) if n > 1 else 0.0
        se = math.sqrt(var / n)
        allowance = C * dt * abs_comp / n
        excess = max(abs(mean) - allowance, 0.0)
        z = excess / se if se > 0 else (0.0 if excess == 0.0 else math.inf)
        rows.append(ResidualRow(lo=a, hi=b, mean=mean, stderr=se, z=z, count=n))

    max_z = max((r.z for r in rows), default=0.0)
    report = ResidualReport(kind="martingale", rows=rows, max_abs_z=max_z,
                            max_abs_residual=max((abs(r.mean) for r in rows), default=0.0),
                            threshold=threshold, passed=max_z < threshold, notes=notes)
    if bundle.n_diverged:
        report.notes.append(f"{bundle.n_diverged} diverged path(s) excluded")
    label = "wrong drift" if inject_wrong_drift else "twisted drift"
    logger.info(f"Martingale residual ({label}, {phi.name}): max z {max_z:.3g} over {len(rows)} bins "
                f"({'pass' if report.passed else 'FAIL'})")
    return report


# --- PDE RESIDUAL ---

def _analytic_nodes(value: AnalyticValue, model: ModelSpec, cost: CostSpec,
                    nodes: Sequence[Tuple[float, Sequence[float]]], fd_step: float,
                    C: float) -> Tuple[List[NodeResidual], int]:
    phi = numeric(value.fn, name=value.label)
    # roundoff of second differences grows like eps / h^2
    tol = C * (fd_step ** 2 + 1e-14 / fd_step ** 2)
    out = []
    for t, x in nodes:
        X = as_batch(x)
        r = apply_generator(model, phi, t, X, fd_step=fd_step, time_step=fd_step)
        if not cost.is_zero:
            r = r - cost.running(t, X) * value.fn(t, X)
        out.append(NodeResidual(t=float(t), x=X[0].tolist(), residual=float(r[0]), tolerance=tol))
    return out, 0


def _surface_nodes(surface: ValueSurface, model: ModelSpec, cost: CostSpec, dt: float,
                   C: float) -> Tuple[List[NodeResidual], int]:
    phi = TestFunction(fn=surface.value, name="v_surface")
    points = surface.node_points()
    lo, hi, cell = surface.lo, surface.hi, surface.cell
    h = float(np.max(cell))
    interior = np.all((points > lo + 0.5 * cell) & (points < hi - 0.5 * cell), axis=1)
    skipped = int(np.count_nonzero(~interior)) * max(surface.times.size - 2, 0)
    X = points[interior]
    out = []
    if X.shape[0] == 0:
        return out, skipped

    for i in range(1, surface.times.size - 1):
        t = float(surface.times[i])
        ht = float(min(surface.times[i] - surface.times[i - 1], surface.times[i + 1] - surface.times[i]))
        keep = np.ones(X.shape[0], dtype=bool)
        if model.jump is not None:
            nodes, _ = jump_nodes(model, t, X)
            shifted = X[:, None, :] + nodes
            keep = np.all((shifted >= lo) & (shifted <= hi), axis=(1, 2))
            skipped += int(np.count_nonzero(~keep))
        Xi = X[keep]
        if Xi.shape[0] == 0:
            continue

        r = apply_generator(model, phi, t, Xi, fd_step=h, time_step=ht)
        v = surface.value(t, Xi)
        if not cost.is_zero:
            r = r - cost.running(t, Xi) * v

        # stderr propagated through the stencil weights
        b = np.abs(model.drift(t, Xi))
        A = np.abs(np.einsum("nii->ni", model.diffusion_matrix(t, Xi)))
        weight_sq = 2.0 / (2.0 * ht) ** 2 + np.sum(2.0 * (b / (2.0 * h) + A / (2.0 * h * h)) ** 2 + (A / (h * h)) ** 2, axis=1)
        se = np.max(np.stack([surface.local_stderr(surface.times[j], Xi) for j in (i - 1, i, i + 1)]), axis=0)
        prop = se * np.sqrt(weight_sq)
        tol = C * (dt + ht * ht + h * h + 3.0 * prop)
        for x, res, tl, s in zip(Xi, r, tol, prop):
            out.append(NodeResidual(t=t, x=x.tolist(), residual=float(res), tolerance=float(tl), stderr=float(s)))
    return out, skipped


def pde_residual(value: ValueSource, model: ModelSpec, cost: CostSpec,
                 nodes: Optional[Sequence[Tuple[float, Sequence[float]]]] = None,
                 fd_step: Optional[float] = None, grid: Optional[TimeGrid] = None,
                 C: Optional[float] = None) -> ResidualReport:
    """a(v) - f v at interior nodes; v solves the backward equation so this should vanish."""
    C = settings.bias_constant if C is None else C
    if isinstance(value, ValueSurface):
        dt = grid.dt if grid is not None else 0.0
        rows, skipped = _surface_nodes(value, model, cost, dt, C)
    else:
        if not nodes:
            raise ValueError("pde_residual on an analytic value needs explicit nodes")
        rows, skipped = _analytic_nodes(value, model, cost, nodes, fd_step or settings.fd_relative_step, C)

    worst = max((abs(r.residual) for r in rows), default=0.0)
    passed = all(abs(r.residual) <= r.tolerance for r in rows)
    notes = [f"{skipped} node(s) skipped: stencil outside the box"] if skipped else []
    if skipped:
        logger.warning(f"PDE residual: {skipped} node(s) skipped, stencil outside the box")
    logger.info(f"PDE residual: max |a(v) - f v| = {worst:.3g} over {len(rows)} nodes "
                f"({'pass' if passed else 'FAIL'})")
    return ResidualReport(kind="pde", nodes=rows, max_abs_residual=worst, passed=passed,
                          skipped=skipped, notes=notes)


# --- INTEGRABILITY ---

def integrability_probe(twisted: TwistedModel, grid: TimeGrid, n_paths: int, p: float,
                        seed: SeedSpec) -> IntegrabilityReport:
    """E_Q*[sum_k |Gamma(v)/v|^p dt] at N and 2N paths."""
    if not 1.0 < p < 2.0:
        raise ValueError(f"p must lie in (1, 2), got {p}")
    if n_paths < 2:
        raise ValueError(f"n_paths must be >= 2, got {n_paths}")

    total = 2 * n_paths
    acc = np.zeros(total)

    def observer(k: int, t: float, X: Array, rows: slice):
        if k < grid.n_steps:
            Xs = np.nan_to_num(X)
            ratio = gamma_batch(twisted.value, twisted.base, t, Xs, twisted.fd_step) / twisted.v(t, Xs)[:, None]
            acc[rows] += np.linalg.norm(ratio, axis=1) ** p * grid.dt

    bundle = simulate_twisted(twisted, grid, total, seed, observer=observer, record=False)
    keep = ~bundle.diverged
    full = acc[keep]
    half = acc[:n_paths][keep[:n_paths]]

    estimate = math.fsum(full) / full.size
    estimate_half = math.fsum(half) / half.size
    stderr = float(np.std(full, ddof=1) / math.sqrt(full.size))
    drift = abs(estimate - estimate_half) / abs(estimate) if estimate != 0.0 else abs(estimate_half)
    report = IntegrabilityReport(p=p, estimate=estimate, stderr=stderr, estimate_half=estimate_half,
                                 n_paths=full.size, relative_drift=drift,
                                 stable=math.isfinite(estimate) and drift < 0.1)
    logger.info(f"Integrability p={p}: {estimate:.6g} +/- {stderr:.3g} (N={n_paths}: {estimate_half:.6g}, "
                f"drift {drift:.2%})")
    return report
