"""Problem instances: forward coefficients, BSDE drivers, terminal data.

Callables are vectorized over a leading batch axis:

* ``b(x)`` maps ``(m, d)`` to ``(m, d)``; ``sigma(x)`` maps to ``(m, d, d')``.
* ``f(t, x, y)`` and ``h(t, x, y)`` take ``t`` as a scalar or ``(m,)`` array,
  ``x`` of shape ``(m, d)`` and ``y`` of shape ``(m, k)``; they return ``(m, k)``.
* ``g(x)`` returns ``(m, k)``.

The PDE being represented is

    du/dt + L u + f(t, x, u) = 0 in D,   <grad l, grad u> + h(t, x, u) = 0 on dD,

with ``L = 1/2 tr(sigma sigma^T D^2) + <b, grad>`` and ``grad l`` the unit
inward normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import special

from . import geometry
from .geometry import Ball, Box, ConvexDomainSpec
from .rng import as_generator

SLACK = 1e-9
RESIDUAL_TOL = 1e-8


class ManufactureError(ValueError):
    """Supplied derivatives disagree with finite differences of the solution."""


def _col(t):
    return np.asarray(t, dtype=float).reshape(-1, 1)


@dataclass(frozen=True)
class ForwardCoefficients:
    b: Callable
    sigma: Callable
    bound_b: float
    bound_sigma: float
    ellipticity_alpha: float
    noise_dim: int


def constant_coefficients(drift, sigma, ellipticity_alpha=None) -> ForwardCoefficients:
    """Constant ``b`` and ``sigma`` with bounds read off the values."""
    drift = np.atleast_1d(np.asarray(drift, dtype=float))
    sig = np.atleast_2d(np.asarray(sigma, dtype=float))
    eig = np.linalg.eigvalsh(sig @ sig.T).min()
    return ForwardCoefficients(
        b=lambda x: np.broadcast_to(drift, x.shape).copy(),
        sigma=lambda x: np.broadcast_to(sig, (x.shape[0],) + sig.shape),
        bound_b=float(np.linalg.norm(drift)),
        bound_sigma=float(np.linalg.norm(sig, 2)),
        ellipticity_alpha=float(eig if ellipticity_alpha is None else ellipticity_alpha),
        noise_dim=sig.shape[1],
    )


@dataclass(frozen=True)
class BSDEDrivers:
    f: Callable
    h: Callable
    g: Callable
    mu_f: float = 0.0
    beta: float = 0.0
    l_h: float = 0.0
    c1: float = 1.0
    c2: float = 1.0
    q: float = 1.0
    k: int = 1
    f_uses_y: bool = False
    h_uses_y: bool = False

    @property
    def y_free(self) -> bool:
        return not (self.f_uses_y or self.h_uses_y)


@dataclass(frozen=True)
class ExactSolution:
    """Known solution with optional derivatives for residual checks.

    ``value`` returns ``(m, k)``; ``dt`` returns ``(m, k)``; ``grad`` returns
    ``(m, k, d)``; ``hess`` returns ``(m, k, d, d)``.
    """

    value: Callable
    dt: Optional[Callable] = None
    grad: Optional[Callable] = None
    hess: Optional[Callable] = None
    terminal_tol: float = RESIDUAL_TOL
    # Monte Carlo comparisons allow max(0.01, bias_constant * sqrt(dt)) of time-step bias
    bias_constant: float = 0.0

    def __call__(self, t, x):
        return self.value(t, x)


@dataclass(frozen=True)
class ProblemInstance:
    name: str
    domain: ConvexDomainSpec
    coefficients: ForwardCoefficients
    drivers: BSDEDrivers
    horizon_T: float
    start_t: float
    start_x: np.ndarray
    exact: Optional[ExactSolution] = None

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.start_x, dtype=float))
        object.__setattr__(self, "start_x", x)
        if x.size != self.domain.dim:
            raise ValueError("start point dimension does not match the domain")
        if not 0 <= self.start_t < self.horizon_T:
            raise ValueError("start time must lie in [0, T)")
        if geometry.distance(self.domain, x) > 0:
            raise ValueError("start point must lie in the closed domain")

    @property
    def dim(self) -> int:
        return self.domain.dim

    def with_start(self, t=None, x=None) -> "ProblemInstance":
        return replace(
            self,
            start_t=self.start_t if t is None else float(t),
            start_x=self.start_x if x is None else np.atleast_1d(np.asarray(x, dtype=float)),
        )

    def exact_value(self):
        if self.exact is None:
            return None
        return self.exact.value(self.start_t, self.start_x[None, :])[0]


# -- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    passed: bool
    worst: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def add(self, name, worst, detail="", slack=SLACK):
        worst = float(worst)
        self.checks.append(AssumptionCheck(name, bool(worst <= slack), worst, detail))


def _space_samples(domain, count, gen, shell=0.5):
    half = count // 2
    inner = geometry.sample_points(domain, count - half, "interior", gen)
    outer = geometry.sample_points(domain, half, "exterior-shell", gen, shell_width=shell)
    return np.concatenate([inner, outer])


def validate_instance(instance: ProblemInstance, sample_budget: int = 1000, rng_stream=0) -> ValidationReport:
    """Check the standing assumptions at random sample points.

    Every entry of the report records the worst value of ``lhs - rhs`` over
    the samples; an entry passes when that value is at most ``1e-9``.
    Coefficients are sampled on the domain plus an exterior shell, since the
    penalized dynamics leave the closed domain.
    """
    if sample_budget < 100:
        raise ValueError("sample_budget must be at least 100")
    gen = as_generator(rng_stream)
    rep = ValidationReport()
    co, dr = instance.coefficients, instance.drivers
    m = sample_budget
    x = _space_samples(instance.domain, m, gen)

    bx = np.asarray(co.b(x), dtype=float)
    rep.add("A1_drift_bounded", np.max(np.linalg.norm(bx, axis=1)) - co.bound_b)
    sx = np.asarray(co.sigma(x), dtype=float)
    rep.add("A1_sigma_bounded", np.max(np.linalg.norm(sx, ord=2, axis=(1, 2))) - co.bound_sigma)
    a = np.einsum("mij,mkj->mik", sx, sx)
    rep.add("A2_ellipticity", co.ellipticity_alpha - np.min(np.linalg.eigvalsh(a)))

    T = instance.horizon_T
    k = dr.k
    t = gen.uniform(0.0, T, m)
    y = 2.0 * gen.standard_normal((m, k))
    y2 = 2.0 * gen.standard_normal((m, k))
    dy = y2 - y
    f1, f2 = dr.f(t, x, y), dr.f(t, x, y2)
    rep.add("A5i_f_monotone", np.max(np.sum(dy * (f2 - f1), axis=1) - dr.mu_f * np.sum(dy**2, axis=1)))
    h1, h2 = dr.h(t, x, y), dr.h(t, x, y2)
    rep.add("A5iii_h_monotone", np.max(np.sum(dy * (h2 - h1), axis=1) - dr.beta * np.sum(dy**2, axis=1)))

    # Lipschitz: both distant and nearby pairs
    perm = gen.permutation(m)
    s = t[perm]
    xs = x[perm] + np.where(gen.random(m) < 0.5, 0.0, 1.0)[:, None] * (
        x - x[perm] + 1e-3 * gen.standard_normal(x.shape)
    )
    ys = y[perm]
    hs = dr.h(s, xs, ys)
    dist = np.abs(t - s) + np.linalg.norm(x - xs, axis=1) + np.linalg.norm(y - ys, axis=1)
    rep.add("A5ii_h_lipschitz", np.max(np.linalg.norm(h1 - hs, axis=1) - dr.l_h * dist))

    ynorm = np.linalg.norm(y, axis=1)
    growth = np.linalg.norm(f1, axis=1) + np.linalg.norm(h1, axis=1) - dr.c1 * (1.0 + ynorm)
    rep.add("A5iv_driver_growth", np.max(growth))
    gx = np.asarray(dr.g(x), dtype=float)
    rep.add(
        "A5v_terminal_growth",
        np.max(np.linalg.norm(gx, axis=1) - dr.c2 * (1.0 + np.linalg.norm(x, axis=1) ** dr.q)),
    )
    if dr.h_uses_y:
        rep.checks.append(AssumptionCheck("A5iii_beta_negative", dr.beta < 0, dr.beta, "beta < 0 when h uses y"))
    if not dr.f_uses_y:
        rep.add("declared_f_y_free", np.max(np.abs(f2 - f1)), slack=0.0)
    if not dr.h_uses_y:
        rep.add("declared_h_y_free", np.max(np.abs(h2 - h1)), slack=0.0)
    if instance.exact is not None:
        for c in residual_checks(instance, count=min(m, 1000), rng_stream=gen).checks:
            rep.checks.append(c)
    return rep


def _generator_apply(coefficients, x, grad, hess):
    # L u = 1/2 tr(sigma sigma^T Hess) + <b, grad>; grad (m, k, d), hess (m, k, d, d)
    s = np.asarray(coefficients.sigma(x), dtype=float)
    a = np.einsum("mij,mkj->mik", s, s)
    bx = np.asarray(coefficients.b(x), dtype=float)
    return 0.5 * np.einsum("mij,mkij->mk", a, hess) + np.einsum("mi,mki->mk", bx, grad)


def residual_checks(instance: ProblemInstance, count: int = 1000, rng_stream=0) -> ValidationReport:
    """Interior PDE residual, boundary flux residual and terminal mismatch of the exact solution."""
    rep = ValidationReport()
    ex = instance.exact
    if ex is None or ex.dt is None or ex.grad is None or ex.hess is None:
        return rep
    gen = as_generator(rng_stream)
    dr, dom, T = instance.drivers, instance.domain, instance.horizon_T
    t = gen.uniform(0.0, T, count)
    x = geometry.sample_points(dom, count, "interior", gen)
    u = ex.value(t, x)
    res = ex.dt(t, x) + _generator_apply(instance.coefficients, x, ex.grad(t, x), ex.hess(t, x)) + dr.f(t, x, u)
    rep.add("pde_residual_interior", np.max(np.abs(res)) - RESIDUAL_TOL, "|du/dt + Lu + f| < 1e-8")
    xb = geometry.sample_points(dom, count, "boundary", gen)
    xb = geometry.project(dom, xb)
    ub = ex.value(t, xb)
    nrm = geometry.inward_normal(dom, xb)
    flux = np.einsum("mi,mki->mk", nrm, ex.grad(t, xb)) + dr.h(t, xb, ub)
    rep.add("pde_residual_boundary", np.max(np.abs(flux)) - RESIDUAL_TOL, "|du/dn + h| < 1e-8")
    xt = geometry.sample_points(dom, count, "interior", gen)
    term = ex.value(np.full(count, T), xt) - np.asarray(dr.g(xt))
    rep.add("pde_residual_terminal", np.max(np.abs(term)) - ex.terminal_tol, f"|u(T) - g| < {ex.terminal_tol:g}")
    return rep


# -- manufactured solutions -----------------------------------------------------


def _check_derivatives(u, u_dt, u_grad, u_hess, domain, T, gen, count=100, rtol=1e-4):
    t = gen.uniform(0.05 * T, 0.95 * T, count)
    x = geometry.sample_points(domain, count, "interior", gen)
    d = domain.dim
    scale = max(1.0, float(np.max(np.abs(np.concatenate(domain.bounding_box())))))
    eps_t, eps_x = 1e-5 * max(T, 1.0), 1e-5 * scale

    def close(fd, an):
        return np.abs(fd - an) <= rtol * np.maximum(1.0, np.abs(an))

    fd_t = (u(t + eps_t, x) - u(t - eps_t, x)) / (2 * eps_t)
    bad = []
    if not np.all(close(fd_t, u_dt(t, x))):
        bad.append("time derivative")
    g = u_grad(t, x)
    H = u_hess(t, x)
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps_x
        if not np.all(close((u(t, x + e) - u(t, x - e)) / (2 * eps_x), g[:, i])):
            bad.append(f"gradient[{i}]")
        fd_h = (u_grad(t, x + e) - u_grad(t, x - e)) / (2 * eps_x)
        if not np.all(close(fd_h, H[:, :, i])):
            bad.append(f"hessian[:, {i}]")
    if bad:
        raise ManufactureError("derivatives inconsistent with finite differences: " + ", ".join(bad))


def manufacture(
    u_exact: Callable,
    u_dt: Callable,
    u_grad: Callable,
    u_hess: Callable,
    domain: ConvexDomainSpec,
    coefficients: ForwardCoefficients,
    kappa: float,
    beta: float,
    horizon_T: float,
    start=None,
    name: str = "manufactured",
    rng_stream=0,
) -> ProblemInstance:
    """Build an instance whose solution is ``u_exact``.

    ``u_exact(t, x)`` and ``u_dt`` return ``(m,)``, ``u_grad`` returns
    ``(m, d)`` and ``u_hess`` returns ``(m, d, d)``. The drivers are

        f(t, x, y) = -du/dt - L u + kappa (y - u)
        h(t, x, y) = -<n(x), grad u> - beta u + beta y

    with ``n`` the normal field of :func:`geometry.normal_extension`, and the
    terminal data is ``g = u(T, .)``.
    """
    if kappa > 0:
        raise ValueError("kappa must be <= 0")
    if beta > 0:
        raise ValueError("beta must be <= 0")
    gen = as_generator(rng_stream)
    T = float(horizon_T)
    _check_derivatives(u_exact, u_dt, u_grad, u_hess, domain, T, gen)

    def source(t, x):
        Lu = _generator_apply(coefficients, x, u_grad(t, x)[:, None, :], u_hess(t, x)[:, None, :, :])[:, 0]
        return -u_dt(t, x) - Lu

    def flux(t, x):
        return -np.einsum("mi,mi->m", geometry.normal_extension(domain, x), u_grad(t, x))

    def f(t, x, y):
        return (source(t, x) + kappa * (y[:, 0] - u_exact(t, x)))[:, None]

    def h(t, x, y):
        return (flux(t, x) + beta * (y[:, 0] - u_exact(t, x)))[:, None]

    def g(x):
        return u_exact(np.full(x.shape[0], T), x)[:, None]

    # constants from samples over the domain plus shell, with head room
    m = 2000
    t = gen.uniform(0.0, T, m)
    x = _space_samples(domain, m, gen)
    F, u0, H0 = np.abs(source(t, x)), np.abs(u_exact(t, x)), np.abs(flux(t, x))
    c1 = 1.25 * max(F.max() + abs(kappa) * u0.max() + H0.max() + abs(beta) * u0.max(), abs(kappa) + abs(beta), 1e-12)
    eps = 1e-6
    dh_dt = np.abs(flux(t + eps, x) - flux(t - eps, x)) / (2 * eps) + abs(beta) * np.abs(u_dt(t, x))
    dh_dx = np.zeros(m)
    for i in range(domain.dim):
        e = np.zeros(domain.dim)
        e[i] = eps
        dh_dx += (np.abs(flux(t, x + e) - flux(t, x - e)) / (2 * eps)) ** 2
    dh_dx = np.sqrt(dh_dx) + abs(beta) * np.linalg.norm(u_grad(t, x), axis=1)
    l_h = 1.5 * max(dh_dt.max(), dh_dx.max(), abs(beta))
    q = 2.0
    gx = np.abs(g(x)[:, 0])
    c2 = 1.25 * max(float(np.max(gx / (1.0 + np.linalg.norm(x, axis=1) ** q))), 1e-12)

    drivers = BSDEDrivers(
        f=f, h=h, g=g, mu_f=float(kappa), beta=float(beta), l_h=float(l_h),
        c1=float(c1), c2=float(c2), q=q, k=1, f_uses_y=kappa != 0, h_uses_y=beta != 0,
    )
    exact = ExactSolution(
        value=lambda t, x: u_exact(t, x)[:, None],
        dt=lambda t, x: u_dt(t, x)[:, None],
        grad=lambda t, x: u_grad(t, x)[:, None, :],
        hess=lambda t, x: u_hess(t, x)[:, None, :, :],
    )
    if start is None:
        lo, hi = domain.bounding_box()
        start = (0.0, geometry.project(domain, 0.5 * (lo + hi)))
    return ProblemInstance(name, domain, coefficients, drivers, T, float(start[0]), start[1], exact)


# -- built-in problems ------------------------------------------------------------


def _zero_k(t, x, y):
    return np.zeros((x.shape[0], 1))


def _neumann_heat(T=1.0):
    dom = Box([0.0], [1.0])
    co = constant_coefficients([0.0], [[1.0]])
    lam = np.pi**2 / 2

    def val(t, x):
        return np.exp(-lam * (T - _col(t))) * np.cos(np.pi * x)

    ex = ExactSolution(
        value=val,
        dt=lambda t, x: lam * val(t, x),
        grad=lambda t, x: (-np.pi * np.exp(-lam * (T - _col(t))) * np.sin(np.pi * x))[:, :, None],
        hess=lambda t, x: (-np.pi**2 * val(t, x))[:, :, None, None],
    )
    dr = BSDEDrivers(f=_zero_k, h=_zero_k, g=lambda x: np.cos(np.pi * x), c1=1.0, c2=1.0, q=1.0)
    return ProblemInstance("neumann-heat-interval", dom, co, dr, T, 0.5, [0.3], ex)


def _affine_flux(T=1.0):
    dom = Box([0.0], [1.0])
    co = constant_coefficients([0.0], [[1.0]])
    return manufacture(
        lambda t, x: x[:, 0] + 0.0 * np.asarray(t),
        lambda t, x: np.zeros(x.shape[0]),
        lambda t, x: np.ones((x.shape[0], 1)),
        lambda t, x: np.zeros((x.shape[0], 1, 1)),
        dom, co, kappa=0.0, beta=0.0, horizon_T=T, start=(0.0, [0.5]), name="affine-flux-interval",
    )


def _nonlinear_manufactured(T=1.0, kappa=-1.0, beta=-1.0):
    dom = Box([0.0], [1.0])
    co = constant_coefficients([0.0], [[1.0]])

    def decay(t):
        return np.exp(-(T - np.asarray(t, dtype=float)))

    return manufacture(
        lambda t, x: decay(t) * (1.0 + x[:, 0] ** 2) / 4.0,
        lambda t, x: decay(t) * (1.0 + x[:, 0] ** 2) / 4.0,
        lambda t, x: (decay(t) * x[:, 0] / 2.0)[:, None],
        lambda t, x: (decay(t) * np.ones(x.shape[0]) / 2.0)[:, None, None],
        dom, co, kappa=kappa, beta=beta, horizon_T=T, start=(0.0, [0.5]),
        name="nonlinear-manufactured-interval",
    )


class DiskNeumannSeries:
    """Neumann heat semigroup on the unit disk applied to ``|x|^2``.

    ``u(t, x) = sum_m c_m exp(-j_m^2 (T - t) / 2) J0(j_m |x|)`` where ``j_0 = 0``,
    ``j_m`` are the positive zeros of ``J1`` and ``c_m = 4 / (j_m^2 J0(j_m))``
    for ``m >= 1`` (``c_0 = 1/2``).
    """

    def __init__(self, T=1.0, terms=40):
        self.T = T
        self.j = np.concatenate([[0.0], special.jn_zeros(1, terms)])
        self.c = np.empty(terms + 1)
        self.c[0] = 0.5
        jj = self.j[1:]
        self.c[1:] = 4.0 / (jj**2 * special.j0(jj))

    def _parts(self, t, x):
        tau = self.T - _col(t)
        w = self.c * np.exp(-0.5 * self.j**2 * tau)  # (m, terms)
        r = np.linalg.norm(x, axis=1)[:, None]
        return w, r

    def value(self, t, x):
        w, r = self._parts(t, x)
        return np.sum(w * special.j0(self.j * r), axis=1, keepdims=True)

    def dt(self, t, x):
        w, r = self._parts(t, x)
        return np.sum(0.5 * self.j**2 * w * special.j0(self.j * r), axis=1, keepdims=True)

    def _radial(self, r):
        # F'(r)/r and F''(r) for F = J0(j r), with the r -> 0 limits
        jr = self.j * r
        small = jr < 1e-6
        safe_r = np.where(r > 0, r, 1.0)
        j1 = special.j1(jr)
        fp_over_r = np.where(small, -0.5 * self.j**2, -self.j * j1 / safe_r)
        fpp = np.where(small, -0.5 * self.j**2, -self.j**2 * special.j0(jr) - fp_over_r)
        return fp_over_r, fpp

    def grad(self, t, x):
        w, r = self._parts(t, x)
        fp_over_r, _ = self._radial(r)
        return (np.sum(w * fp_over_r, axis=1)[:, None] * x)[:, None, :]

    def hess(self, t, x):
        w, r = self._parts(t, x)
        a, fpp = self._radial(r)
        A = np.sum(w * a, axis=1)
        B = np.sum(w * fpp, axis=1)
        rr = r[:, 0]
        safe = np.where(rr > 0, rr, 1.0)
        xh = x / safe[:, None]
        proj = np.einsum("mi,mj->mij", xh, xh) * (rr > 0)[:, None, None]
        eye = np.eye(x.shape[1])[None]
        H = B[:, None, None] * proj + A[:, None, None] * (eye - proj)
        return H[:, None, :, :]


def _ball_2d(T=1.0):
    dom = Ball([0.0, 0.0], 1.0)
    co = constant_coefficients([0.0, 0.0], np.eye(2))
    ser = DiskNeumannSeries(T)
    # the series converges like 1/terms at t = T only; away from T it is exact to rounding.
    # Projected Euler on the curved boundary is biased by about 0.85 sqrt(dt) here.
    ex = ExactSolution(
        value=ser.value, dt=ser.dt, grad=ser.grad, hess=ser.hess, terminal_tol=2e-2, bias_constant=1.0
    )
    dr = BSDEDrivers(
        f=_zero_k, h=_zero_k, g=lambda x: np.sum(x**2, axis=1, keepdims=True), c1=1.0, c2=1.0, q=2.0
    )
    return ProblemInstance("ball-2d-pure-neumann", dom, co, dr, T, 0.0, [0.5, 0.0], ex)


def _discontinuous_drift(T=1.0):
    dom = Box([0.0], [1.0])
    co = ForwardCoefficients(
        b=lambda x: 0.5 * np.sign(x - 0.5),
        sigma=lambda x: np.ones((x.shape[0], 1, 1)),
        bound_b=0.5, bound_sigma=1.0, ellipticity_alpha=1.0, noise_dim=1,
    )
    dr = BSDEDrivers(f=_zero_k, h=_zero_k, g=lambda x: x**2, c1=1.0, c2=1.0, q=2.0)
    return ProblemInstance("discontinuous-drift-interval", dom, co, dr, T, 0.0, [0.5], None)


_BUILTINS = {
    "neumann-heat-interval": _neumann_heat,
    "affine-flux-interval": _affine_flux,
    "ball-2d-pure-neumann": _ball_2d,
    "nonlinear-manufactured-interval": _nonlinear_manufactured,
    "discontinuous-drift-interval": _discontinuous_drift,
}

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin(name: str, horizon_T: Optional[float] = None) -> ProblemInstance:
    """Named test problem, optionally with a different horizon (default ``T = 1``)."""
    if name not in _BUILTINS:
        raise KeyError(f"unknown problem {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
    return _BUILTINS[name]() if horizon_T is None else _BUILTINS[name](float(horizon_T))
