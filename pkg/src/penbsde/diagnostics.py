"""Path diagnostics: up-crossings, conditional variation and coupling distances.

The conditional variation of a process ``Y`` on a partition ``t_0 < ... < t_N``
is ``sum_k E| E[Y_{k+1} - Y_k | F_k] |``. Here ``F_k`` is proxied by the
forward state ``X_k`` through the same regression used by the solver, and the
supremum over partitions by the maximum over dyadic coarsenings of the grid.
A bounded criterion is evidence for, not proof of, tightness of the laws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bsde import PolynomialBasis, conditional_expectation
from .forward import Ensemble
from .rng import as_generator


@dataclass
class DiagnosticsReport:
    """Summary statistics; dictionaries are keyed by penalty level."""

    cv_estimate: float = 0.0
    upcrossings: dict = field(default_factory=dict)
    sup_coupling_distance: dict = field(default_factory=dict)
    sup_coupling_stderr: dict = field(default_factory=dict)
    k_coupling_distance: dict = field(default_factory=dict)
    k_coupling_stderr: dict = field(default_factory=dict)
    k_terminal_mean: dict = field(default_factory=dict)
    k_terminal_reflected: Optional[float] = None
    sup_abs: float = 0.0

    def to_dict(self) -> dict:
        def keyed(d):
            return {str(k): float(v) for k, v in d.items()}

        return {
            "cv_estimate": float(self.cv_estimate),
            "upcrossings": {f"{a},{b}": float(v) for (a, b), v in self.upcrossings.items()},
            "sup_coupling_distance": keyed(self.sup_coupling_distance),
            "sup_coupling_stderr": keyed(self.sup_coupling_stderr),
            "k_coupling_distance": keyed(self.k_coupling_distance),
            "k_coupling_stderr": keyed(self.k_coupling_stderr),
            "k_terminal_mean": keyed(self.k_terminal_mean),
            "k_terminal_reflected": None if self.k_terminal_reflected is None else float(self.k_terminal_reflected),
            "sup_abs": float(self.sup_abs),
        }


def upcrossings(path, a: float, b: float):
    """Number of completed passages from strictly below ``a`` to strictly above ``b``.

    ``path`` is a 1-d array (returns an int) or a time-major ``(N+1, M)``
    array (returns one count per column).
    """
    if not a < b:
        raise ValueError("up-crossing levels need a < b")
    p = np.asarray(path, dtype=float)
    single = p.ndim == 1
    p = p.reshape(p.shape[0], -1)
    below = np.zeros(p.shape[1], dtype=bool)
    count = np.zeros(p.shape[1], dtype=np.int64)
    for v in p:
        up = below & (v > b)
        count += up
        below = (below & ~up) | (v < a)
    return int(count[0]) if single else count


def sup_abs(paths) -> float:
    """Mean over paths of ``max_t |Y_t|`` for a time-major ``(N+1, M[, k])`` array."""
    p = np.asarray(paths, dtype=float)
    mag = np.abs(p) if p.ndim == 2 else np.linalg.norm(p, axis=2)
    return float(mag.max(axis=0).mean())


def _dyadic_indices(N):
    s = 1
    while s <= N:
        idx = list(range(0, N + 1, s))
        if idx[-1] != N:
            idx.append(N)
        yield s, idx
        s *= 2


def _cv_on(Y, X, idx, basis, domain, ridge):
    total = 0.0
    for i0, i1 in zip(idx[:-1], idx[1:]):
        inc = (Y[i1] - Y[i0]).reshape(Y.shape[1], -1)
        fit = conditional_expectation(basis, X[i0], inc, domain, ridge)
        total += float(np.mean(np.linalg.norm(fit, axis=1)))
    return total


def conditional_variation(
    Y, features, basis=None, domain=None, ridge_lambda=None, return_scales: bool = False
):
    """Regression estimate of the conditional variation of ``Y``.

    ``Y`` is time-major ``(N+1, M)`` or ``(N+1, M, k)`` and ``features`` is
    ``(N+1, M, d)`` (``X`` at each grid time). Returns the maximum over the
    grid and its dyadic coarsenings, and optionally the per-scale values.
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(features, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.shape[:2] != Y.shape[:2]:
        raise ValueError("Y and features must share the time grid and path count")
    basis = PolynomialBasis() if basis is None else basis
    scales = {s: _cv_on(Y, X, idx, basis, domain, ridge_lambda) for s, idx in _dyadic_indices(Y.shape[0] - 1)}
    best = max(scales.values())
    return (best, scales) if return_scales else best


def cv_noise_floor(
    Y, features, basis=None, domain=None, ridge_lambda=None, replicates: int = 20, rng_stream=0
) -> float:
    """Upper band (mean + 3 std) of the estimator under a permutation null.

    Each replicate shuffles the increments of ``Y`` across paths independently
    at every step, which destroys any dependence on the conditioning state
    while keeping the marginal increment distribution. The estimator applied
    to such data measures pure regression noise.
    """
    gen = as_generator(rng_stream)
    Y = np.asarray(Y, dtype=float)
    inc = np.diff(Y, axis=0)
    vals = []
    for _ in range(replicates):
        shuffled = np.stack([row[gen.permutation(row.shape[0])] for row in inc])
        Yp = np.concatenate([Y[:1], Y[:1] + np.cumsum(shuffled, axis=0)])
        vals.append(conditional_variation(Yp, features, basis, domain, ridge_lambda))
    vals = np.asarray(vals)
    return float(vals.mean() + 3.0 * vals.std(ddof=1))


def tightness_criterion(Y, features, basis=None, domain=None) -> float:
    """``cv + mean sup|Y|``: the quantity whose boundedness in ``n`` is checked."""
    return conditional_variation(Y, features, basis, domain) + sup_abs(Y)


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    se = v.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else 0.0
    return float(v.mean()), float(se)


def _from_bundles(coupled):
    # coupled: sequence of (penalized bundles, reflected bundle), one pair per path
    first_pen, first_ref = coupled[0]
    levels = [b.level for b in first_pen]
    sd = {n: [] for n in levels}
    sk = {n: [] for n in levels}
    kT = {n: [] for n in levels}
    kref = []
    for pen, ref in coupled:
        if any(not np.array_equal(b.times, first_ref.times) for b in list(pen) + [ref]):
            raise ValueError("coupled bundles live on different grids")
        for b in pen:
            d = b.X - ref.X
            sd[b.level].append(np.max(np.linalg.norm(d.reshape(d.shape[0], -1), axis=1)))
            sk[b.level].append(np.max(np.abs(b.k - ref.k)))
            kT[b.level].append(b.k[-1])
        kref.append(ref.k[-1])
    return levels, sd, sk, kT, kref


def _from_ensembles(penalized, reflected):
    levels, sd, sk, kT = [], {}, {}, {}
    for e in penalized:
        if e.grid != reflected.grid or e.paths != reflected.paths:
            raise ValueError("coupled ensembles live on different grids or path counts")
        if e.seed != reflected.seed:
            raise ValueError("coupled ensembles must share the seed")
        levels.append(e.level)
        sd[e.level] = np.linalg.norm(e.X - reflected.X, axis=2).max(axis=0)
        sk[e.level] = np.abs(e.k - reflected.k).max(axis=0)
        kT[e.level] = e.k[-1]
    return levels, sd, sk, kT, reflected.k[-1]


def _from_streams(streams):
    ref = [s for s in streams if s.level is None]
    if not ref:
        raise ValueError("streams need a reflected level")
    levels = [s.level for s in streams if s.level is not None]
    by = {s.level: s for s in streams}
    return (
        levels,
        {n: by[n].sup_dist for n in levels},
        {n: by[n].sup_k_dist for n in levels},
        {n: by[n].k_T for n in levels},
        ref[0].k_T,
    )


def coupling_report(coupled, reflected: Optional[Ensemble] = None) -> DiagnosticsReport:
    """Mean sup-distances between penalized and reflected paths per level.

    ``coupled`` is either a list of penalized :class:`Ensemble` objects (with
    ``reflected`` given), a list of :class:`penbsde.bsde.LevelStream`
    including the reflected level, or a list of ``simulate_coupled`` results.
    """
    if not len(coupled):
        raise ValueError("nothing to report")
    first = coupled[0]
    if isinstance(first, Ensemble):
        if reflected is None:
            raise ValueError("penalized ensembles need the reflected ensemble")
        parts = _from_ensembles(coupled, reflected)
    elif isinstance(first, tuple):
        parts = _from_bundles(coupled)
    else:
        parts = _from_streams(coupled)
    levels, sd, sk, kT, kref = parts
    rep = DiagnosticsReport()
    for n in levels:
        rep.sup_coupling_distance[n], rep.sup_coupling_stderr[n] = _mean_se(sd[n])
        rep.k_coupling_distance[n], rep.k_coupling_stderr[n] = _mean_se(sk[n])
        rep.k_terminal_mean[n] = float(np.mean(kT[n]))
    rep.k_terminal_reflected = float(np.mean(kref))
    return rep


def upcrossing_summary(paths, level_pairs: Sequence) -> dict:
    """Mean up-crossing count per ``(a, b)`` pair over the columns of ``paths``."""
    return {(a, b): float(np.mean(upcrossings(paths, a, b))) for a, b in level_pairs}
