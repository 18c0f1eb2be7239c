"""Euler-Maruyama simulation of jump diffusions with thinned jumps.

Every path owns a Philox stream (see ``core.rng``) and consumes it in a fixed
order: initial state, all Gaussian increments ``(n_steps, d)``, one uniform
per step for the jump count, then jump sizes and acceptance uniforms as the
jumps happen. Chunking and thread count therefore never change the output.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FilePath
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.stats import poisson

from expotwist.config import settings
from expotwist.core.errors import DegenerateTwistError
from expotwist.core.rng import SeedSpec, path_generator
from expotwist.core.utils import format_float
from expotwist.schemas.model import JumpSpec, ModelSpec, TimeGrid

logger = logging.getLogger(__name__)

Array = np.ndarray
DriftFn = Callable[[float, Array], Array]
InitialSampler = Callable[[np.random.Generator], Array]
# observer(k, t_k, X_k, rows): called once per grid node with the chunk's states
Observer = Callable[[int, float, Array, slice], None]
JumpMark = Tuple[int, Array]


class JumpRule(Protocol):
    """Thinning rule: proposals at rate ``envelope``, each kept with ``acceptance``."""

    def envelope(self, t: float, X: Array) -> Array: ...

    def acceptance(self, t: float, x: Array, q: Array) -> float: ...


@dataclass(frozen=True)
class ReferenceJumps:
    """Jumps of the reference measure: every proposal is a jump."""
    jump: JumpSpec

    def envelope(self, t: float, X: Array) -> Array:
        return self.jump.intensity(t, X)

    def acceptance(self, t: float, x: Array, q: Array) -> float:
        return 1.0


@dataclass(frozen=True)
class Path:
    times: Array
    states: Array
    jump_marks: Tuple[JumpMark, ...] = ()
    diverged: bool = False

    @property
    def terminal(self) -> Array:
        return self.states[-1]


@dataclass(frozen=True)
class PathBundle:
    grid: TimeGrid
    terminal: Array                 # (N, d), NaN rows for diverged paths
    jump_counts: Array              # (N,) accepted jumps per path
    diverged: Array                 # (N,) bool
    seed: SeedSpec
    states: Optional[Array] = None  # (N, n_steps + 1, d) when recorded
    jump_marks: Tuple[Tuple[JumpMark, ...], ...] = field(default=())

    @property
    def n_paths(self) -> int:
        return self.terminal.shape[0]

    @property
    def dim(self) -> int:
        return self.terminal.shape[1]

    @property
    def n_diverged(self) -> int:
        return int(np.count_nonzero(self.diverged))

    def path(self, i: int) -> Path:
        if self.states is None:
            raise ValueError("bundle was simulated with record=False")
        marks = self.jump_marks[i] if self.jump_marks else ()
        return Path(times=self.grid.times, states=self.states[i], jump_marks=marks,
                    diverged=bool(self.diverged[i]))


def poisson_counts(u: Array, mean: Array) -> Array:
    """Inverse-CDF Poisson draws: smallest k with P(N <= k) >= u."""
    counts = np.zeros(u.shape[0], dtype=np.int64)
    active = np.isfinite(mean) & (mean > 0.0)
    if np.any(active):
        k = poisson.ppf(u[active], mean[active])
        counts[active] = np.maximum(np.nan_to_num(k, nan=0.0), 0.0).astype(np.int64)
    return counts


class PathSampler:
    """Vectorized Euler-Maruyama over chunks of paths."""

    def __init__(self, model: ModelSpec, grid: TimeGrid, seed: SeedSpec,
                 drift_override: Optional[DriftFn] = None,
                 jump_rule: Optional[JumpRule] = None,
                 initial_sampler: Optional[InitialSampler] = None,
                 initial_state: Optional[Array] = None,
                 chunk_size: Optional[int] = None,
                 workers: Optional[int] = None):
        self.model = model
        self.grid = grid
        self.seed = seed
        self.drift = drift_override or model.drift
        self.jump_rule = jump_rule
        if self.jump_rule is None and model.jump is not None:
            self.jump_rule = ReferenceJumps(model.jump)
        self.initial_sampler = initial_sampler
        self.initial_state = None
        if initial_state is not None:
            self.initial_state = np.atleast_1d(np.asarray(initial_state, dtype=float))
        self.chunk_size = chunk_size or settings.chunk_size
        self.workers = max(1, workers or settings.workers)
        self.threshold = settings.divergence_threshold
        self.logger = logging.getLogger(__name__)

    def _initial(self, rng: np.random.Generator, row: int) -> Array:
        if self.initial_state is not None:
            # one start for every path, or one per row
            if self.initial_state.ndim == 2:
                return self.initial_state[row].copy()
            return self.initial_state.copy()
        if self.initial_sampler is not None:
            return np.asarray(self.initial_sampler(rng), dtype=float)
        return self.model.initial_law.draw(rng)

    def _jumps(self, k: int, t: float, X: Array, u: Array, gens: Sequence[np.random.Generator],
               dead: Array) -> Tuple[Array, Array, List[Tuple[int, Array]]]:
        """Accepted jump displacement per row for step k, frozen at the left endpoint X."""
        n, d = X.shape
        env = np.asarray(self.jump_rule.envelope(t, X), dtype=float)
        env = np.where(dead, 0.0, env)
        mean = env * self.grid.dt
        flooded = mean > settings.max_jump_proposals_per_step
        if np.any(flooded):
            bad = int(np.flatnonzero(flooded)[0])
            raise DegenerateTwistError(
                f"jump envelope {env[bad]:.3g} at t={t}, x={X[bad].tolist()} gives {mean[bad]:.3g} proposals "
                f"per step (limit {settings.max_jump_proposals_per_step:g}); v is near its floor")
        counts = poisson_counts(u, mean)

        shift = np.zeros((n, d))
        accepted = np.zeros(n, dtype=np.int64)
        marks = []
        sampler = self.model.jump.sampler
        for i in np.flatnonzero(counts):
            rng = gens[i]
            x = X[i]
            total = np.zeros(d)
            for _ in range(int(counts[i])):
                q = np.asarray(sampler(t, x[None, :], rng), dtype=float).reshape(d)
                p = self.jump_rule.acceptance(t, x, q)
                # p >= 1 consumes no uniform, so an all-accepting rule replays the reference stream
                if p < 1.0 and rng.random() >= p:
                    continue
                total += q
                accepted[i] += 1
            if accepted[i]:
                shift[i] = total
                marks.append((i, total))
        return shift, accepted, marks

    def _simulate_chunk(self, lo: int, hi: int, first_index: int, out: dict,
                        observer: Optional[Observer], record: bool):
        n = hi - lo
        d = self.model.dim
        n_steps, dt = self.grid.n_steps, self.grid.dt
        sqrt_dt = math.sqrt(dt)
        times = self.grid.times
        rows = slice(lo, hi)
        has_jumps = self.jump_rule is not None and self.model.jump is not None

        gens = [path_generator(self.seed, first_index + i) for i in range(lo, hi)]
        X = np.empty((n, d))
        xi = np.empty((n, n_steps, d))
        U = np.empty((n, n_steps)) if has_jumps else None
        for j, rng in enumerate(gens):
            X[j] = self._initial(rng, lo + j)
            xi[j] = rng.standard_normal((n_steps, d))
            if has_jumps:
                U[j] = rng.random(n_steps)

        dead = ~np.all(np.isfinite(X), axis=1) | np.any(np.abs(X) > self.threshold, axis=1)
        X[dead] = 0.0
        chunk_marks = [[] for _ in range(n)]

        def visible(state):
            return np.where(dead[:, None], np.nan, state)

        if record:
            out["states"][rows, 0] = visible(X)

        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(n_steps):
                t = float(times[k])
                if observer is not None:
                    observer(k, t, visible(X), rows)

                b = np.asarray(self.drift(t, X), dtype=float)
                S = np.asarray(self.model.diffusion(t, X), dtype=float)
                X_next = X + b * dt + np.einsum("nij,nj->ni", S, sqrt_dt * xi[:, k, :])

                if has_jumps:
                    shift, accepted, marks = self._jumps(k, t, X, U[:, k], gens, dead)
                    X_next += shift
                    out["jump_counts"][rows] += accepted
                    for j, total in marks:
                        chunk_marks[j].append((k + 1, total))

                blown = ~np.all(np.isfinite(X_next), axis=1) | np.any(np.abs(X_next) > self.threshold, axis=1)
                newly = blown & ~dead
                if np.any(newly):
                    self.logger.debug(f"{int(newly.sum())} path(s) diverged at step {k + 1}")
                dead |= blown
                X_next[dead] = 0.0
                X = X_next
                if record:
                    out["states"][rows, k + 1] = visible(X)

            if observer is not None:
                observer(n_steps, float(times[n_steps]), visible(X), rows)

        out["terminal"][rows] = visible(X)
        out["diverged"][rows] = dead
        out["marks"][lo:hi] = [tuple(m) for m in chunk_marks]

    def sample(self, n_paths: int, first_index: int = 0, observer: Optional[Observer] = None,
               record: bool = True) -> PathBundle:
        if n_paths < 1:
            raise ValueError(f"n_paths must be >= 1, got {n_paths}")

        d, n_steps = self.model.dim, self.grid.n_steps
        out = {
            "terminal": np.empty((n_paths, d)),
            "diverged": np.zeros(n_paths, dtype=bool),
            "jump_counts": np.zeros(n_paths, dtype=np.int64),
            "marks": [()] * n_paths,
            "states": np.empty((n_paths, n_steps + 1, d)) if record else None,
        }
        chunks = [(lo, min(lo + self.chunk_size, n_paths)) for lo in range(0, n_paths, self.chunk_size)]
        self.logger.debug(f"Simulating {n_paths} paths x {n_steps} steps in {len(chunks)} chunk(s), "
                          f"{self.workers} worker(s)")

        if self.workers == 1 or len(chunks) == 1:
            for lo, hi in chunks:
                self._simulate_chunk(lo, hi, first_index, out, observer, record)
        else:
            # Chunks write disjoint row ranges of the shared buffers
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                futures = [pool.submit(self._simulate_chunk, lo, hi, first_index, out, observer, record)
                           for lo, hi in chunks]
                for future in futures:
                    future.result()

        bundle = PathBundle(
            grid=self.grid,
            terminal=out["terminal"],
            jump_counts=out["jump_counts"],
            diverged=out["diverged"],
            seed=self.seed,
            states=out["states"],
            jump_marks=tuple(out["marks"]) if self.model.jump is not None else (),
        )
        if bundle.n_diverged:
            self.logger.warning(f"{bundle.n_diverged} of {n_paths} path(s) diverged (|X| > {self.threshold:g})")
        return bundle


def sample_paths(model: ModelSpec, grid: TimeGrid, n_paths: int, seed: SeedSpec,
                 drift_override: Optional[DriftFn] = None, *,
                 jump_rule: Optional[JumpRule] = None,
                 initial_sampler: Optional[InitialSampler] = None,
                 initial_state: Optional[Array] = None,
                 first_index: int = 0,
                 observer: Optional[Observer] = None,
                 record: bool = True,
                 workers: Optional[int] = None) -> PathBundle:
    """Simulate ``n_paths`` paths; ``drift_override`` replaces b when given."""
    sampler = PathSampler(model, grid, seed, drift_override=drift_override, jump_rule=jump_rule,
                          initial_sampler=initial_sampler, initial_state=initial_state, workers=workers)
    return sampler.sample(n_paths, first_index=first_index, observer=observer, record=record)


def dump_paths(bundle: PathBundle, path: FilePath) -> FilePath:
    """One CSV row per (path, time): path_id,t,x_1..x_d."""
    if bundle.states is None:
        raise ValueError("bundle was simulated with record=False")
    path = FilePath(path)
    times = bundle.grid.times
    header = ["path_id", "t"] + [f"x_{i + 1}" for i in range(bundle.dim)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for i in range(bundle.n_paths):
            for k, t in enumerate(times):
                writer.writerow([i, format_float(t)] + [format_float(x) for x in bundle.states[i, k]])
    return path
