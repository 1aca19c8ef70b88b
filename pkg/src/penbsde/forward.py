"""Penalized and reflected forward simulation.

Two one-step maps share a diffusion substep ``x~ = x + b(x) dt + sigma(x) dW``:

* reflected (Euler-Skorokhod): ``x' = project(x~)``;
* penalized at level ``n``: the penalty flow ``dx = -2n (x - pi) dt`` with the
  projection ``pi = project(x~)`` frozen takes one implicit Euler step,
  ``x' = pi + (x~ - pi) / (1 + 2 n dt)``. The contraction factor stays in
  (0, 1) for any ``n dt``, so large levels need no smaller time step.

In both cases ``dK = x' - x~`` and ``dk = |dK|``. For a convex domain the
displacement points along the inward normal, so ``|dK|`` equals
``<grad l, dK>`` with the extension ``grad l = -delta / |delta|``.

Paths are processed in fixed blocks of ``BLOCK`` consecutive indices and the
Brownian increments come from :mod:`penbsde.rng`, so results do not depend on
how many worker threads are used.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import geometry
from .problems import ProblemInstance
from .rng import brownian_increments

BLOCK = 8192
NOISE_CHUNK = 1 << 20
MEMORY_BUDGET = int(2.5 * 2**30)


class NonFiniteStateError(FloatingPointError):
    pass


class MemoryBudgetError(MemoryError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if not self.t0 < self.T:
            raise ValueError("grid needs t0 < T")
        if self.steps < 1:
            raise ValueError("grid needs at least one step")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @classmethod
    def for_instance(cls, instance: ProblemInstance, steps: Optional[int] = None, dt: Optional[float] = None):
        span = instance.horizon_T - instance.start_t
        if steps is None:
            if dt is None:
                raise ValueError("give steps or dt")
            steps = max(1, int(round(span / dt)))
        return cls(instance.start_t, instance.horizon_T, int(steps))


@dataclass
class PathBundle:
    """One trajectory with its boundary functionals.

    ``level`` is the penalty level ``n`` or ``None`` for the reflected scheme.
    """

    times: np.ndarray
    X: np.ndarray
    K: np.ndarray
    k: np.ndarray
    noise: np.ndarray
    level: Optional[float] = None


@dataclass
class Ensemble:
    """Time-major path storage: ``X[i, j]`` is path ``j`` at grid index ``i``."""

    level: Optional[float]
    grid: TimeGrid
    seed: int
    X: np.ndarray
    k: np.ndarray
    K: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None

    @property
    def paths(self) -> int:
        return self.X.shape[1]

    @property
    def dk(self) -> np.ndarray:
        return np.diff(self.k, axis=0)

    def bundle(self, j: int) -> PathBundle:
        if self.K is None or self.noise is None:
            raise ValueError("ensemble was simulated without increments; pass keep_increments=True")
        return PathBundle(self.grid.times, self.X[:, j], self.K[:, j], self.k[:, j], self.noise[:, j], self.level)


def _diffuse(instance, x, dW, dt):
    co = instance.coefficients
    s = co.sigma(x)
    return x + co.b(x) * dt + np.einsum("mij,mj->mi", s, dW)


def _penalty_substep(domain, n, x_tilde, dt):
    pi = domain._project(x_tilde)
    if n is None:
        x_next = pi
    else:
        x_next = pi + (x_tilde - pi) / (1.0 + 2.0 * n * dt)
    dK = x_next - x_tilde
    return x_next, dK, np.linalg.norm(dK, axis=1)


def step_penalized(instance: ProblemInstance, n: float, x, dW, dt: float):
    """One splitting step of the penalized SDE. Returns ``(x_next, dK, dk)``."""
    if n < 1:
        raise ValueError("penalty level must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    xb, single = geometry._as_batch(x)
    dWb = np.atleast_2d(np.asarray(dW, dtype=float))
    x_next, dK, dk = _penalty_substep(instance.domain, n, _diffuse(instance, xb, dWb, dt), dt)
    if single:
        return x_next[0], dK[0], dk[0]
    return x_next, dK, dk


def step_reflected(instance: ProblemInstance, x, dW, dt: float):
    """One projected Euler step. Returns ``(x_next, dK, dk)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    xb, single = geometry._as_batch(x)
    dWb = np.atleast_2d(np.asarray(dW, dtype=float))
    x_next, dK, dk = _penalty_substep(instance.domain, None, _diffuse(instance, xb, dWb, dt), dt)
    if single:
        return x_next[0], dK[0], dk[0]
    return x_next, dK, dk


def march(instance: ProblemInstance, levels: Sequence, grid: TimeGrid, seed: int, path_ids):
    """Advance all ``levels`` on the same noise, one grid step at a time.

    Yields ``(i, dW, states)`` for steps ``i = 0 .. N-1`` where ``states[j]``
    is ``(x_next, dK, dk)`` for ``levels[j]`` (``None`` = reflected).
    """
    path_ids = np.asarray(path_ids)
    m = path_ids.size
    dt = grid.dt
    dim_w = instance.coefficients.noise_dim
    xs = [np.tile(instance.start_x, (m, 1)) for _ in levels]
    chunk = max(1, NOISE_CHUNK // max(m * dim_w, 1))
    for s0 in range(0, grid.steps, chunk):
        s1 = min(grid.steps, s0 + chunk)
        dW = brownian_increments(seed, path_ids, s0, s1, dim_w, dt)
        for i in range(s0, s1):
            w = dW[i - s0]
            states = []
            for j, lvl in enumerate(levels):
                x_next, dK, dk = _penalty_substep(instance.domain, lvl, _diffuse(instance, xs[j], w, dt), dt)
                if not np.isfinite(x_next).all():
                    raise NonFiniteStateError(f"non-finite state at step {i} (level {lvl})")
                xs[j] = x_next
                states.append((x_next, dK, dk))
            yield i, w, states


def run_blocks(fn, path_count: int, workers: int = 1):
    """Apply ``fn(block_index, path_ids)`` to fixed path blocks; results in block order."""
    if path_count < 1:
        raise ValueError("path_count must be >= 1")
    blocks = [np.arange(s, min(s + BLOCK, path_count)) for s in range(0, path_count, BLOCK)]
    if workers <= 1 or len(blocks) == 1:
        return [fn(b, ids) for b, ids in enumerate(blocks)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(len(blocks)), blocks))


def _estimate_bytes(instance, grid, M, nlevels, keep_increments):
    d, dw = instance.dim, instance.coefficients.noise_dim
    per = d + 1 + ((d + dw) if keep_increments else 0)
    return 8 * (grid.steps + 1) * M * per * nlevels


def batch_simulate_coupled(
    instance: ProblemInstance,
    levels: Sequence,
    grid: TimeGrid,
    path_count: int,
    seed: int,
    workers: int = 1,
    keep_increments: bool = False,
    memory_budget: int = MEMORY_BUDGET,
) -> list:
    """Ensembles for every level in ``levels`` driven by identical increments."""
    need = _estimate_bytes(instance, grid, path_count, len(levels), keep_increments)
    if need > memory_budget:
        raise MemoryBudgetError(
            f"storing {len(levels)} ensemble(s) of {path_count} paths needs {need / 2**30:.2f} GiB "
            f"(budget {memory_budget / 2**30:.2f} GiB); use the streaming estimators "
            "(solve mode 'linear-mc' through estimate_u_point) or fewer paths"
        )
    N, d, dw = grid.steps, instance.dim, instance.coefficients.noise_dim
    L = len(levels)
    X = [np.empty((N + 1, path_count, d)) for _ in range(L)]
    k = [np.empty((N + 1, path_count)) for _ in range(L)]
    K = [np.empty((N + 1, path_count, d)) for _ in range(L)] if keep_increments else None
    noise = np.empty((N, path_count, dw)) if keep_increments else None
    for j in range(L):
        X[j][0] = instance.start_x
        k[j][0] = 0.0
        if K is not None:
            K[j][0] = 0.0

    def work(_, ids):
        sl = slice(ids[0], ids[-1] + 1)
        run_k = [np.zeros(ids.size) for _ in range(L)]
        run_K = [np.zeros((ids.size, d)) for _ in range(L)]
        for i, w, states in march(instance, levels, grid, seed, ids):
            if noise is not None:
                noise[i, sl] = w
            for j, (x_next, dK, dk) in enumerate(states):
                X[j][i + 1, sl] = x_next
                run_k[j] += dk
                k[j][i + 1, sl] = run_k[j]
                if K is not None:
                    run_K[j] += dK
                    K[j][i + 1, sl] = run_K[j]

    run_blocks(work, path_count, workers)
    return [
        Ensemble(lvl, grid, seed, X[j], k[j], None if K is None else K[j], noise)
        for j, lvl in enumerate(levels)
    ]


def batch_simulate(
    instance: ProblemInstance,
    n: Optional[float],
    grid: TimeGrid,
    path_count: int,
    seed: int,
    workers: int = 1,
    keep_increments: bool = False,
    memory_budget: int = MEMORY_BUDGET,
) -> Ensemble:
    """Simulate ``path_count`` paths; ``n=None`` selects the reflected scheme.

    Path ``j`` draws its increments from the stream keyed by ``(seed, j)``.
    """
    return batch_simulate_coupled(
        instance, [n], grid, path_count, seed, workers, keep_increments, memory_budget
    )[0]


def _stream(rng_stream):
    if isinstance(rng_stream, tuple):
        return int(rng_stream[0]), int(rng_stream[1])
    return int(rng_stream), 0


def _single_path(instance, levels, grid, rng_stream):
    seed, pid = _stream(rng_stream)
    N, d = grid.steps, instance.dim
    L = len(levels)
    X = np.empty((L, N + 1, d))
    K = np.zeros((L, N + 1, d))
    k = np.zeros((L, N + 1))
    noise = np.empty((N, instance.coefficients.noise_dim))
    X[:, 0] = instance.start_x
    for i, w, states in march(instance, levels, grid, seed, [pid]):
        noise[i] = w[0]
        for j, (x_next, dK, dk) in enumerate(states):
            X[j, i + 1] = x_next[0]
            K[j, i + 1] = K[j, i] + dK[0]
            k[j, i + 1] = k[j, i] + dk[0]
    return [PathBundle(grid.times, X[j], K[j], k[j], noise.copy(), levels[j]) for j in range(L)]


def simulate_penalized(instance: ProblemInstance, n: float, grid: TimeGrid, rng_stream=0) -> PathBundle:
    """One penalized path; ``rng_stream`` is a seed or a ``(seed, path_id)`` pair."""
    if n < 1:
        raise ValueError("penalty level must be >= 1")
    return _single_path(instance, [n], grid, rng_stream)[0]


def simulate_reflected(instance: ProblemInstance, grid: TimeGrid, rng_stream=0) -> PathBundle:
    return _single_path(instance, [None], grid, rng_stream)[0]


def simulate_coupled(instance: ProblemInstance, n_list: Sequence, grid: TimeGrid, rng_stream=0):
    """Penalized paths for every ``n`` in ``n_list`` plus the reflected path, on shared noise."""
    if len(n_list) == 0:
        raise ValueError("n_list must be nonempty")
    bundles = _single_path(instance, list(n_list) + [None], grid, rng_stream)
    return bundles[:-1], bundles[-1]


def write_path_csv(ensemble: Ensemble, path: str, max_paths: Optional[int] = None) -> None:
    """Dump ``time, path_id, x0..x{d-1}, k`` rows (debugging aid; large)."""
    M = ensemble.paths if max_paths is None else min(max_paths, ensemble.paths)
    d = ensemble.X.shape[2]
    times = ensemble.grid.times
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "path_id"] + [f"x{i}" for i in range(d)] + ["k"])
        for j in range(M):
            for i, t in enumerate(times):
                w.writerow([repr(float(t)), j] + [repr(float(v)) for v in ensemble.X[i, j]] + [repr(float(ensemble.k[i, j]))])
    os.replace(tmp, path)
