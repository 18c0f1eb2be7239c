"""Monte Carlo Feynman-Kac value function.

v(t, x) = E^{t,x}[exp(-int_t^T f(r, X_r) dr - g(X_T))]

estimated by nested Monte Carlo at the nodes of a space-time grid, with the
running cost integrated by the left-endpoint rule used everywhere else.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path as FilePath
from typing import Optional, Sequence, Tuple

import numpy as np

from expotwist.config import settings
from expotwist.core.errors import EstimationError
from expotwist.core.rng import SeedSpec, path_generator
from expotwist.core.utils import format_float
from expotwist.schemas.model import CostSpec, ModelSpec, TimeGrid
from expotwist.schemas.reports import ResidualReport, ResidualRow
from expotwist.schemas.value import ValueSource
from expotwist.services.model_core import as_batch, jump_nodes
from expotwist.services.path_sampler import sample_paths

logger = logging.getLogger(__name__)

Array = np.ndarray


def _lerp(v0: Array, v1: Array, w: Array) -> Array:
    # w == 1 returns v1 itself so upper nodes are reproduced bit for bit
    return np.where(w >= 1.0, v1, v0 + w * (v1 - v0))


def _locate(nodes: Array, x: Array) -> Tuple[Array, Array]:
    """Left cell index and in-cell weight of each (already clamped) coordinate."""
    if nodes.size == 1:
        return np.zeros(x.shape[0], dtype=np.int64), np.zeros(x.shape[0])
    i = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, nodes.size - 2)
    w = (x - nodes[i]) / (nodes[i + 1] - nodes[i])
    return i, np.clip(w, 0.0, 1.0)


@dataclass(frozen=True)
class ValueSurface:
    """Gridded v(t_i, x_j) with multilinear interpolation, clamped at the box faces."""
    times: Array                 # (n_t,)
    axes: Tuple[Array, ...]      # per-axis space nodes
    values: Array                # (n_t, n_1, ..., n_d)
    stderr: Array                # same shape as values
    eps_v: float = settings.eps_v

    has_analytic_gradient = False

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def lo(self) -> Array:
        return np.array([a[0] for a in self.axes])

    @property
    def hi(self) -> Array:
        return np.array([a[-1] for a in self.axes])

    @property
    def cell(self) -> Array:
        """Smallest node spacing per axis."""
        return np.array([np.min(np.diff(a)) if a.size > 1 else 0.0 for a in self.axes])

    def node_points(self) -> Array:
        """Space nodes in row-major order, shape (prod n_i, d)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def _interpolate(self, table: Array, t: float, X: Array) -> Array:
        X = as_batch(X)
        n = X.shape[0]
        rows = np.arange(n)
        tq = np.full(n, min(max(float(t), self.times[0]), self.times[-1]))
        i, w = _locate(self.times, tq)
        upper = np.minimum(i + 1, self.times.size - 1)
        A = _lerp(table[i], table[upper], w.reshape((n,) + (1,) * self.dim))
        for axis, nodes in enumerate(self.axes):
            xq = np.clip(X[:, axis], nodes[0], nodes[-1])
            j, w = _locate(nodes, xq)
            j_up = np.minimum(j + 1, nodes.size - 1)
            shape = (n,) + (1,) * (A.ndim - 2)
            A = _lerp(A[rows, j], A[rows, j_up], w.reshape(shape))
        return A

    def value(self, t: float, X: Array) -> Array:
        return np.maximum(self._interpolate(self.values, t, X), self.eps_v)

    def local_stderr(self, t: float, X: Array) -> Array:
        return self._interpolate(self.stderr, t, X)

    def gradient(self, t: float, X: Array, fd_step: Optional[float] = None) -> Array:
        """Central differences with step >= one cell, one-sided at the box faces."""
        X = as_batch(X)
        G = np.zeros_like(X, dtype=float)
        base = settings.fd_relative_step * (1.0 + np.linalg.norm(X, axis=1)) if fd_step is None \
            else np.full(X.shape[0], float(fd_step))
        lo, hi, cell = self.lo, self.hi, self.cell
        for i in range(self.dim):
            h = np.maximum(base, cell[i])
            Xp, Xm = X.copy(), X.copy()
            Xp[:, i] = np.clip(X[:, i] + h, lo[i], hi[i])
            Xm[:, i] = np.clip(X[:, i] - h, lo[i], hi[i])
            spread = Xp[:, i] - Xm[:, i]
            diff = self.value(t, Xp) - self.value(t, Xm)
            G[:, i] = np.divide(diff, spread, out=np.zeros_like(diff), where=spread > 0)
        return G


def interpolate_value(surface: ValueSurface, t: float, x) -> float:
    """Multilinear v(t, x); x outside the box is clamped to the nearest face."""
    return float(surface.value(t, as_batch(x))[0])


# --- ESTIMATION ---

def _sub_grid(grid: TimeGrid, t: float) -> TimeGrid:
    n = max(1, int(round((grid.horizon - t) / grid.dt)))
    return TimeGrid(horizon=grid.horizon, n_steps=n, start=float(t))


class RunningCost:
    """Observer accumulating sum_k f(t_k, X_k) dt over the steps of a simulation."""

    def __init__(self, cost: CostSpec, n_paths: int, grid: TimeGrid):
        self.cost = cost
        self.grid = grid
        self.total = np.zeros(n_paths)

    def __call__(self, k: int, t: float, X: Array, rows: slice):
        if k < self.grid.n_steps and not self.cost.is_zero:
            self.total[rows] += self.cost.running(t, X) * self.grid.dt


def _discounted_payoffs(cost: CostSpec, running: Array, terminal: Array, diverged: Array) -> Tuple[Array, Array]:
    with np.errstate(invalid="ignore", over="ignore"):
        phi = running + cost.terminal(terminal)
        w = np.exp(-phi)
    keep = ~diverged & np.isfinite(phi)
    return w, keep


def estimate_value_point(model: ModelSpec, cost: CostSpec, t: float, x, n_sub: int,
                         grid: TimeGrid, seed: SeedSpec) -> Tuple[float, float]:
    """Monte Carlo v(t, x) from ``n_sub`` sub-paths started at (t, x), with its standard error."""
    if not grid.start <= t <= grid.horizon:
        raise ValueError(f"t={t} outside [{grid.start}, {grid.horizon}]")
    if n_sub < 2:
        raise ValueError(f"n_sub must be >= 2, got {n_sub}")

    x = np.atleast_1d(np.asarray(x, dtype=float))
    eps = settings.eps_v
    if t >= grid.horizon:
        v = float(np.exp(-cost.terminal(x[None, :]))[0])
        return min(max(v, eps), 1.0), 0.0

    sub = _sub_grid(grid, t)
    acc = RunningCost(cost, n_sub, sub)
    bundle = sample_paths(model, sub, n_sub, seed, initial_state=x, observer=acc, record=False)
    w, keep = _discounted_payoffs(cost, acc.total, bundle.terminal, bundle.diverged)
    if not np.any(keep):
        raise EstimationError(f"all {n_sub} sub-paths diverged at t={t}, x={x.tolist()}", t=t, x=x.tolist())

    w = w[keep]
    stderr = float(np.std(w, ddof=1) / math.sqrt(w.size)) if w.size > 1 else 0.0
    value = min(max(float(np.mean(w)), eps), 1.0)
    return value, stderr


def default_box(model: ModelSpec, grid: TimeGrid, width: float = 6.0) -> Tuple[Array, Array]:
    """x0 +/- width * (|sigma| sqrt(T) + |b| T), widened by the jump mass when there are jumps."""
    if model.initial_law.is_point_mass:
        x0 = np.asarray(model.initial_law.point, dtype=float)
    else:
        x0 = np.zeros(model.dim)
    X0 = x0[None, :]
    T = grid.horizon - grid.start
    sigma = float(np.max(np.abs(model.diffusion(grid.start, X0))))
    b = float(np.max(np.abs(model.drift(grid.start, X0))))
    half = width * (sigma * math.sqrt(T) + b * T)
    if model.jump is not None:
        lam = float(model.jump.intensity(grid.start, X0)[0])
        nodes, weights = jump_nodes(model, grid.start, X0)
        q_abs = float(np.sum(weights[0] * np.max(np.abs(nodes[0]), axis=1)))
        half += lam * T * q_abs + width * math.sqrt(lam * T) * q_abs
    if half == 0.0:
        half = 1.0
    return x0 - half, x0 + half


def surface_time_indices(grid: TimeGrid, n_time_nodes: int) -> Array:
    n_time_nodes = max(2, min(n_time_nodes, grid.n_steps + 1))
    return np.unique(np.round(np.linspace(0, grid.n_steps, n_time_nodes)).astype(int))


def build_value_surface(model: ModelSpec, cost: CostSpec, grid: TimeGrid,
                        box: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
                        nodes_per_axis: int = 41, n_sub: int = 1000, seed: Optional[SeedSpec] = None,
                        n_time_nodes: int = 21) -> ValueSurface:
    """Fill a ValueSurface by nested Monte Carlo; the terminal row is exp(-g) exactly.

    Time node i uses seed block i + 1; node j's sub-paths take path indices
    j * n_sub .. (j + 1) * n_sub - 1 of that block.
    """
    if n_sub < 2:
        raise ValueError(f"n_sub must be >= 2, got {n_sub}")
    if nodes_per_axis < 2:
        raise ValueError(f"nodes_per_axis must be >= 2, got {nodes_per_axis}")
    seed = seed or SeedSpec(settings.default_seed)
    lo, hi = box if box is not None else default_box(model, grid)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (model.dim,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (model.dim,))
    axes = tuple(np.linspace(lo[i], hi[i], nodes_per_axis) for i in range(model.dim))

    k_nodes = surface_time_indices(grid, n_time_nodes)
    times = grid.times[k_nodes]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    n_points = points.shape[0]
    shape = tuple(a.size for a in axes)

    values = np.empty((times.size,) + shape)
    stderr = np.zeros_like(values)
    eps = settings.eps_v

    logger.info(f"Building value surface: {times.size} time nodes x {n_points} space nodes x {n_sub} sub-paths")
    terminal = np.exp(-cost.terminal(points))
    values[-1] = np.maximum(terminal, eps).reshape(shape)

    for i, k in enumerate(k_nodes[:-1]):
        sub = grid.tail(int(k))
        starts = np.repeat(points, n_sub, axis=0)
        acc = RunningCost(cost, starts.shape[0], sub)
        bundle = sample_paths(model, sub, starts.shape[0], seed.with_block(i + 1),
                              initial_state=starts, observer=acc, record=False)
        w, keep = _discounted_payoffs(cost, acc.total, bundle.terminal, bundle.diverged)
        w = np.where(keep, w, np.nan).reshape(n_points, n_sub)
        counts = np.sum(keep.reshape(n_points, n_sub), axis=1)

        if np.any(counts == 0):
            bad = int(np.flatnonzero(counts == 0)[0])
            raise EstimationError(f"all sub-paths diverged at surface node t={times[i]}, x={points[bad].tolist()}",
                                  t=float(times[i]), x=points[bad].tolist())
        excursion = np.count_nonzero(~keep)
        if excursion:
            logger.warning(f"Surface time node t={times[i]:.6g}: {excursion} sub-path(s) excluded")

        mean = np.nanmean(w, axis=1)
        sd = np.where(counts > 1, np.nanstd(w, axis=1, ddof=1) / np.sqrt(np.maximum(counts, 1)), 0.0)
        values[i] = np.clip(mean, eps, 1.0).reshape(shape)
        stderr[i] = sd.reshape(shape)
        logger.debug(f"Surface time node {i} (t={times[i]:.6g}) done, max stderr {float(np.max(sd)):.3g}")

    return ValueSurface(times=times, axes=axes, values=values, stderr=stderr, eps_v=eps)


def initial_normalizer(value: ValueSource, model: ModelSpec, n_draws: int, seed: SeedSpec,
                       start: float = 0.0) -> Tuple[float, float]:
    """Monte Carlo of int v(start, x) mu(dx), the same number as E_P[exp(-phi)]."""
    law = model.initial_law
    if law.is_point_mass:
        x0 = np.asarray(law.point, dtype=float)[None, :]
        return float(value.value(start, x0)[0]), 0.0
    if n_draws < 2:
        raise ValueError(f"n_draws must be >= 2, got {n_draws}")

    rng = path_generator(seed, 0)
    X = np.stack([law.draw(rng) for _ in range(n_draws)])
    v = value.value(start, X)
    return float(np.mean(v)), float(np.std(v, ddof=1) / math.sqrt(n_draws))


def value_martingale_check(value: ValueSource, model: ModelSpec, cost: CostSpec, grid: TimeGrid,
                           n_paths: int, seed: SeedSpec, n_checkpoints: int = 20,
                           threshold: Optional[float] = None) -> ResidualReport:
    """Increments of exp(-int_0^t f) v(t, X_t) along reference paths must average to zero."""
    threshold = threshold or settings.residual_z_threshold
    if isinstance(value, ValueSurface):
        checkpoints = [grid.index_of(t) for t in value.times]
    else:
        checkpoints = surface_time_indices(grid, n_checkpoints + 1).tolist()
    checkpoints = sorted(set(checkpoints))
    positions = {k: j for j, k in enumerate(checkpoints)}

    M = np.full((n_paths, len(checkpoints)), np.nan)
    band = np.zeros((n_paths, len(checkpoints)))
    running = np.zeros(n_paths)

    def observer(k: int, t: float, X: Array, rows: slice):
        if k in positions:
            j = positions[k]
            M[rows, j] = np.exp(-running[rows]) * value.value(t, X)
            if isinstance(value, ValueSurface):
                band[rows, j] = np.exp(-running[rows]) * value.local_stderr(t, X)
        if k < grid.n_steps and not cost.is_zero:
            running[rows] += cost.running(t, X) * grid.dt

    bundle = sample_paths(model, grid, n_paths, seed, observer=observer, record=False)
    keep = ~bundle.diverged & np.all(np.isfinite(M), axis=1)

    rows = []
    notes = []
    for j in range(len(checkpoints) - 1):
        inc = (M[keep, j + 1] - M[keep, j])
        count = inc.size
        mean = math.fsum(inc) / count
        se = float(np.std(inc, ddof=1) / math.sqrt(count)) if count > 1 else 0.0
        allowance = 3.0 * float(np.mean(band[keep, j] + band[keep, j + 1]))
        excess = max(abs(mean) - allowance, 0.0)
        z = excess / se if se > 0 else (0.0 if excess == 0.0 else math.inf)
        rows.append(ResidualRow(lo=float(grid.times[checkpoints[j]]), hi=float(grid.times[checkpoints[j + 1]]),
                                mean=mean, stderr=se, z=z, count=count))
    if not np.all(keep):
        notes.append(f"{int(np.count_nonzero(~keep))} path(s) excluded")

    max_z = max((r.z for r in rows), default=0.0)
    report = ResidualReport(kind="value_martingale", rows=rows, max_abs_z=max_z,
                            max_abs_residual=max((abs(r.mean) for r in rows), default=0.0),
                            threshold=threshold, passed=max_z < threshold, notes=notes)
    logger.info(f"Value martingale check: max z {max_z:.3g} over {len(rows)} increments "
                f"({'pass' if report.passed else 'FAIL'})")
    return report


# --- PERSISTENCE ---

def dump_surface(surface: ValueSurface, path: FilePath) -> FilePath:
    """CSV t,x_1..x_d,v,stderr at 17 significant digits."""
    path = FilePath(path)
    points = surface.node_points()
    n_points = points.shape[0]
    header = ["t"] + [f"x_{i + 1}" for i in range(surface.dim)] + ["v", "stderr"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for i, t in enumerate(surface.times):
            v = surface.values[i].reshape(n_points)
            se = surface.stderr[i].reshape(n_points)
            for j in range(n_points):
                writer.writerow([format_float(t)] + [format_float(x) for x in points[j]]
                                + [format_float(v[j]), format_float(se[j])])
    return path


def load_surface(path: FilePath, eps_v: Optional[float] = None) -> ValueSurface:
    path = FilePath(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        data = np.array([[float(c) for c in row] for row in reader], dtype=float)
    dim = len(header) - 3
    if dim < 1 or header[0] != "t" or header[-2:] != ["v", "stderr"]:
        raise ValueError(f"{path}: not a value-surface CSV (header {header})")

    times = np.unique(data[:, 0])
    axes = tuple(np.unique(data[:, 1 + i]) for i in range(dim))
    shape = (times.size,) + tuple(a.size for a in axes)
    # rows were written time-major, then space nodes in row-major order
    values = data[:, -2].reshape(shape)
    stderr = data[:, -1].reshape(shape)
    return ValueSurface(times=times, axes=axes, values=values, stderr=stderr,
                        eps_v=settings.eps_v if eps_v is None else eps_v)
