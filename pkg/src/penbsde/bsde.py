"""Backward solvers for the generalized BSDE with a boundary Stieltjes term.

The discrete scheme on a uniform grid is

    Y_N = g(X_N)
    C_i = E_i[ Y_{i+1} + h(t_{i+1}, X_{i+1}, Y_{i+1}) (k_{i+1} - k_i) ]
    Y_i = C_i + f(t_i, X_i, Y_i) dt          (Picard, or f(t_i, X_i, C_i) explicit)

``E_i`` is a least-squares regression on functions of ``X_i``. The boundary
increment is only known at ``t_{i+1}``, so it sits inside the conditional
expectation together with ``Y_{i+1}``.

When ``f`` and ``h`` do not depend on ``y`` the recursion telescopes into a
plain Monte Carlo average of

    g(X_N) + sum_i f(t_i, X_i) dt + sum_i h(t_{i+1}, X_{i+1}) (k_{i+1} - k_i)

which :func:`solve_linear_mc` computes path by path.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import forward
from .forward import Ensemble, TimeGrid, march, run_blocks
from .problems import ProblemInstance

MODES = ("linear-mc", "lsmc-explicit", "lsmc-picard")
PICARD_TOL = 1e-10


class RegressionError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class PolynomialBasis:
    """Monomials of total degree <= ``max_degree`` in coordinates rescaled to [-1, 1]."""

    max_degree: int = 3

    def size(self, dim: int) -> int:
        return len(self._exponents(dim))

    def _exponents(self, dim):
        return [e for e in itertools.product(range(self.max_degree + 1), repeat=dim) if sum(e) <= self.max_degree]

    def design(self, x, domain=None) -> np.ndarray:
        lo, hi = _box(domain, x)
        z = (2.0 * (x - lo) / (hi - lo)) - 1.0
        cols = []
        for e in self._exponents(x.shape[1]):
            c = np.ones(x.shape[0])
            for i, p in enumerate(e):
                if p:
                    c = c * z[:, i] ** p
            cols.append(c)
        return np.stack(cols, axis=1)


@dataclass(frozen=True)
class PiecewiseConstantBasis:
    """Indicators of a uniform grid of hypercube cells over the bounding box."""

    cells_per_axis: int = 16

    def size(self, dim: int) -> int:
        return self.cells_per_axis**dim

    def cell_index(self, x, domain=None) -> np.ndarray:
        lo, hi = _box(domain, x)
        c = self.cells_per_axis
        ij = np.clip(np.floor((x - lo) / (hi - lo) * c).astype(np.int64), 0, c - 1)
        return np.ravel_multi_index(tuple(ij.T), (c,) * x.shape[1])

    def design(self, x, domain=None) -> np.ndarray:
        idx = self.cell_index(x, domain)
        A = np.zeros((x.shape[0], self.size(x.shape[1])))
        A[np.arange(x.shape[0]), idx] = 1.0
        return A


RegressionBasis = Union[PolynomialBasis, PiecewiseConstantBasis]


def _box(domain, x):
    # scaling box: the domain's bounding box, or the sample range without a domain
    if domain is not None:
        return domain.bounding_box()
    lo, hi = x.min(axis=0), x.max(axis=0)
    flat = hi - lo <= 0
    return lo - flat, hi + flat


@dataclass(frozen=True)
class SolverConfig:
    mode: str = "lsmc-picard"
    picard_iterations: int = 3
    ridge_lambda: Optional[float] = None  # None: 1e-10 * largest singular value squared
    basis: RegressionBasis = field(default_factory=PolynomialBasis)
    keep_paths: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.picard_iterations < 1:
            raise ValueError("picard_iterations must be >= 1")
        if self.ridge_lambda is not None and self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be nonnegative")


@dataclass
class BackwardSolution:
    """Result of a backward solve.

    ``samples[j]`` is the realized pathwise sum ``g + sum f dt + sum h dk``
    of path ``j`` (evaluated along the regressed ``Y`` in the lsmc modes).
    Its spread gives ``stderr`` and paired standard errors between
    solutions on shared paths.
    ``Y`` (time-major, ``(N+1, M, k)``) and ``martingale_residuals``
    (``(N, M, k)``) are only filled when ``keep_paths`` is set.
    """

    u_hat: np.ndarray
    stderr: np.ndarray
    samples: np.ndarray
    sup_abs_Y: np.ndarray
    Y: Optional[np.ndarray] = None
    martingale_residuals: Optional[np.ndarray] = None
    residual_mean: Optional[np.ndarray] = None
    residual_std: Optional[np.ndarray] = None
    picard_converged: bool = True
    picard_change: float = 0.0
    level: Optional[float] = None


def regress(features, targets, ridge_lambda: float = 0.0):
    """Least-squares fit of ``targets`` on the columns of ``features``.

    Returns ``(coefficients, fitted)``. With ``ridge_lambda == 0`` a
    rank-deficient design raises :class:`RegressionError`.
    """
    A = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if A.shape[0] < A.shape[1]:
        raise RegressionError(f"{A.shape[0]} samples for {A.shape[1]} basis functions")
    if ridge_lambda == 0:
        coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
        if rank < A.shape[1]:
            raise RegressionError(
                f"design matrix has rank {rank} < {A.shape[1]}; set ridge_lambda > 0"
            )
    else:
        G = A.T @ A
        coef = np.linalg.solve(G + ridge_lambda * np.eye(G.shape[0]), A.T @ y)
    return coef, A @ coef


def auto_ridge(features) -> float:
    G = features.T @ features
    return 1e-10 * float(np.linalg.eigvalsh(G)[-1])


def conditional_expectation(basis, x, targets, domain, ridge_lambda=None):
    """Regression estimate of ``E[targets | x]`` evaluated at the sample points."""
    if np.all(x == x[0]):
        return np.broadcast_to(targets.mean(axis=0), targets.shape).copy()
    if isinstance(basis, PiecewiseConstantBasis):
        idx = basis.cell_index(x, domain)
        n = basis.size(x.shape[1])
        counts = np.bincount(idx, minlength=n)
        out = np.empty_like(targets)
        for c in range(targets.shape[1]):
            sums = np.bincount(idx, weights=targets[:, c], minlength=n)
            means = sums / np.maximum(counts, 1)
            out[:, c] = means[idx]
        return out
    A = basis.design(x, domain)
    lam = auto_ridge(A) if ridge_lambda is None else ridge_lambda
    # centring keeps the ridge from shrinking the mean, so constants are reproduced exactly
    mean = targets.mean(axis=0)
    return mean + regress(A, targets - mean, lam)[1]


def _check_basis(config, instance, M):
    p = config.basis.size(instance.dim)
    if p > M / 10:
        raise ValueError(f"basis of size {p} needs at least {10 * p} paths, got {M}")


def _summary(samples):
    M = samples.shape[0]
    u = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(M) if M > 1 else np.zeros_like(u)
    return u, se


def solve_linear_mc(instance: ProblemInstance, ensemble: Ensemble, keep_paths: bool = False) -> BackwardSolution:
    """Pathwise Feynman-Kac sum for drivers that do not depend on ``y``."""
    dr = instance.drivers
    if not dr.y_free:
        raise ValueError("linear-mc needs f and h independent of y; use an lsmc mode")
    X, k = ensemble.X, ensemble.k
    N, M = X.shape[0] - 1, X.shape[1]
    t = ensemble.grid.times
    dt = ensemble.grid.dt
    dummy = np.zeros((M, dr.k))
    Y = np.asarray(dr.g(X[N]), dtype=float).copy()
    store = np.empty((N + 1, M, dr.k)) if keep_paths else None
    if keep_paths:
        store[N] = Y
    sup = np.linalg.norm(Y, axis=1)
    for i in range(N - 1, -1, -1):
        Y = Y + dr.f(t[i], X[i], dummy) * dt + dr.h(t[i + 1], X[i + 1], dummy) * (k[i + 1] - k[i])[:, None]
        if keep_paths:
            store[i] = Y
        np.maximum(sup, np.linalg.norm(Y, axis=1), out=sup)
    u, se = _summary(Y)
    return BackwardSolution(u, se, Y, sup, Y=store, level=ensemble.level)


def solve_lsmc(instance: ProblemInstance, ensemble: Ensemble, config: SolverConfig) -> BackwardSolution:
    """Regression-based backward recursion (explicit or Picard in ``f``)."""
    if config.mode not in ("lsmc-explicit", "lsmc-picard"):
        raise ValueError("solve_lsmc needs an lsmc mode")
    dr, dom = instance.drivers, instance.domain
    X, k = ensemble.X, ensemble.k
    N, M = X.shape[0] - 1, X.shape[1]
    _check_basis(config, instance, M)
    t = ensemble.grid.times
    dt = ensemble.grid.dt
    Y = np.asarray(dr.g(X[N]), dtype=float).copy()
    keep = config.keep_paths
    Ys = np.empty((N + 1, M, dr.k)) if keep else None
    res_all = np.empty((N, M, dr.k)) if keep else None
    if keep:
        Ys[N] = Y
    res_mean = np.empty((N, dr.k))
    res_std = np.empty((N, dr.k))
    sup = np.linalg.norm(Y, axis=1)
    worst_change = 0.0
    # pathwise realized sum along the regressed Y; its spread gives an honest stderr
    Z = Y.copy()
    for i in range(N - 1, -1, -1):
        dk = (k[i + 1] - k[i])[:, None]
        hk = dr.h(t[i + 1], X[i + 1], Y) * dk
        target = Y + hk
        C = conditional_expectation(config.basis, X[i], target, dom, config.ridge_lambda)
        res = target - C
        res_mean[i] = res.mean(axis=0)
        res_std[i] = res.std(axis=0)
        if keep:
            res_all[i] = res
        if config.mode == "lsmc-explicit":
            Y = C + dr.f(t[i], X[i], C) * dt
        else:
            Y = C
            for _ in range(config.picard_iterations):
                Y_new = C + dr.f(t[i], X[i], Y) * dt
                change = float(np.max(np.abs(Y_new - Y)))
                Y = Y_new
            worst_change = max(worst_change, change)
        Z += hk + dr.f(t[i], X[i], Y) * dt
        if keep:
            Ys[i] = Y
        np.maximum(sup, np.linalg.norm(Y, axis=1), out=sup)
    u = Y.mean(axis=0)
    se = Z.std(axis=0, ddof=1) / np.sqrt(M) if M > 1 else np.zeros_like(u)
    return BackwardSolution(
        u, se, Z, sup, Ys, res_all, res_mean, res_std,
        picard_converged=worst_change <= PICARD_TOL or config.mode == "lsmc-explicit",
        picard_change=worst_change, level=ensemble.level,
    )


def solve(instance: ProblemInstance, ensemble: Ensemble, config: SolverConfig) -> BackwardSolution:
    if config.mode == "linear-mc":
        return solve_linear_mc(instance, ensemble, config.keep_paths)
    return solve_lsmc(instance, ensemble, config)


@dataclass
class LevelStream:
    """Streaming output for one level: per-path estimator samples and coupling statistics."""

    level: Optional[float]
    samples: np.ndarray
    k_T: np.ndarray
    sup_dist: Optional[np.ndarray] = None
    sup_k_dist: Optional[np.ndarray] = None

    def summary(self):
        return _summary(self.samples)


def stream_levels(
    instance: ProblemInstance,
    levels: Sequence,
    grid: TimeGrid,
    path_count: int,
    seed: int,
    workers: int = 1,
    with_estimates: bool = True,
) -> list:
    """Single forward pass over all ``levels`` on shared noise without storing paths.

    Accumulates the linear Feynman-Kac sum per path (drivers must be
    ``y``-free when ``with_estimates``) and, when ``None`` (reflected) is among
    the levels, the sup-distances ``|X^n - X^ref|`` and ``|k^n - k^ref|``.
    """
    dr = instance.drivers
    if with_estimates and not dr.y_free:
        raise ValueError("streaming estimates need f and h independent of y")
    levels = list(levels)
    ref = levels.index(None) if None in levels else None
    t = grid.times
    dt = grid.dt
    L = len(levels)

    def work(_, ids):
        m = ids.size
        dummy = np.zeros((m, dr.k))
        x0 = np.tile(instance.start_x, (m, 1))
        acc = [np.zeros((m, dr.k)) for _ in range(L)]
        if with_estimates:
            f0 = dr.f(t[0], x0, dummy) * dt
            acc = [f0.copy() for _ in range(L)]
        kk = [np.zeros(m) for _ in range(L)]
        sup = [np.zeros(m) for _ in range(L)]
        supk = [np.zeros(m) for _ in range(L)]
        last = [x0] * L
        for i, _w, states in march(instance, levels, grid, seed, ids):
            for j, (x_next, _dK, dk) in enumerate(states):
                kk[j] += dk
                last[j] = x_next
                if with_estimates:
                    acc[j] += dr.h(t[i + 1], x_next, dummy) * dk[:, None]
                    if i + 1 < grid.steps:
                        acc[j] += dr.f(t[i + 1], x_next, dummy) * dt
            if ref is not None:
                xr, kr = states[ref][0], kk[ref]
                for j in range(L):
                    np.maximum(sup[j], np.linalg.norm(states[j][0] - xr, axis=1), out=sup[j])
                    np.maximum(supk[j], np.abs(kk[j] - kr), out=supk[j])
        if with_estimates:
            for j in range(L):
                acc[j] += dr.g(last[j])
        return acc, kk, sup, supk

    parts = run_blocks(work, path_count, workers)
    out = []
    for j, lvl in enumerate(levels):
        samples = np.concatenate([p[0][j] for p in parts])
        kT = np.concatenate([p[1][j] for p in parts])
        sd = np.concatenate([p[2][j] for p in parts]) if ref is not None else None
        sk = np.concatenate([p[3][j] for p in parts]) if ref is not None else None
        out.append(LevelStream(lvl, samples, kT, sd, sk))
    return out


def estimate_u_point(
    instance: ProblemInstance,
    n: Optional[float],
    grid: TimeGrid,
    path_count: int,
    seed: int,
    config: SolverConfig = SolverConfig(mode="linear-mc"),
    workers: int = 1,
):
    """``u^n(t, x)`` (``n`` given) or ``u(t, x)`` (``n=None``) at the instance's start point.

    Returns ``(u_hat, stderr)`` as arrays of length ``k``.
    """
    if config.mode == "linear-mc":
        if not instance.drivers.y_free:
            raise ValueError("linear-mc needs f and h independent of y; use an lsmc mode")
        return stream_levels(instance, [n], grid, path_count, seed, workers)[0].summary()
    _check_basis(config, instance, path_count)
    ens = forward.batch_simulate(instance, n, grid, path_count, seed, workers)
    sol = solve_lsmc(instance, ens, config)
    return sol.u_hat, sol.stderr


@dataclass(frozen=True)
class ComparisonReport:
    u_a: np.ndarray
    u_b: np.ndarray
    difference: np.ndarray  # u_a - u_b
    combined_stderr: np.ndarray
    violation: bool


def comparison_check(
    instance_a: ProblemInstance, instance_b: ProblemInstance, ensemble: Ensemble, config: SolverConfig
) -> ComparisonReport:
    """Solve both problems on the same paths and flag ``u_a > u_b + 3 se``.

    The standard error is that of the paired per-path differences.
    """
    sa = solve(instance_a, ensemble, config)
    sb = solve(instance_b, ensemble, config)
    diff_samples = sa.samples - sb.samples
    M = diff_samples.shape[0]
    se = diff_samples.std(axis=0, ddof=1) / np.sqrt(M)
    diff = sa.u_hat - sb.u_hat
    return ComparisonReport(sa.u_hat, sb.u_hat, diff, se, bool(np.any(diff > 3.0 * se)))
