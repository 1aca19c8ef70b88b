"""Convex domains: projection, distance, penalty vector and inward normals.

All routines accept a single point of shape ``(d,)`` or a batch of shape
``(m, d)`` and return arrays of the matching leading shape. Domains are
immutable and safe to share between threads.

Half-space intersections use the convention ``D = {x : <a_i, x> < c_i}``
with unit *outward* normals ``a_i``; the inward face normal is ``-a_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import as_generator

BOUNDARY_TOL = 1e-9


class ProjectionError(RuntimeError):
    """Iterative projection did not reach the requested tolerance."""


class InteriorPointError(ValueError):
    """Inward normal requested at a point strictly inside the domain."""


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return np.atleast_2d(x), single


def _unbatch(y, single):
    return y[0] if single else y


@dataclass(frozen=True, eq=False)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return self.center.size

    def bounding_box(self):
        return self.center - self.radius, self.center + self.radius

    def _project(self, x):
        v = x - self.center
        r = np.linalg.norm(v, axis=1)
        out = x.copy()
        far = r > self.radius
        p = self.center + v[far] * (self.radius / r[far])[:, None]
        # rounding may leave p a hair outside; pull it in so that projection is idempotent
        shrink = 1.0
        bad = np.linalg.norm(p - self.center, axis=1) > self.radius
        while bad.any():
            shrink -= 2.0**-52
            p[bad] = self.center + v[far][bad] * (shrink * self.radius / r[far][bad])[:, None]
            bad = np.linalg.norm(p - self.center, axis=1) > self.radius
        out[far] = p
        return out

    def _depth(self, x):
        # distance to the boundary for points of the closed domain
        return self.radius - np.linalg.norm(x - self.center, axis=1)

    def _boundary_normal(self, x):
        v = self.center - x
        r = np.linalg.norm(v, axis=1, keepdims=True)
        e1 = np.zeros(self.dim)
        e1[0] = 1.0
        return np.where(r > 0, v / np.where(r > 0, r, 1.0), e1)

    def _smooth_normal(self, x):
        return (self.center - x) / self.radius

    def _sample_boundary(self, count, gen):
        u = gen.standard_normal((count, self.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return self.center + self.radius * u

    def to_dict(self):
        return {"variant": "ball", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or not np.all(lo < hi):
            raise ValueError("Box needs lo < hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    def bounding_box(self):
        return self.lo.copy(), self.hi.copy()

    def _project(self, x):
        return np.clip(x, self.lo, self.hi)

    def _depth(self, x):
        return np.minimum(x - self.lo, self.hi - x).min(axis=1)

    def _face_normals(self, x, tol):
        n = (x <= self.lo + tol).astype(float) - (x >= self.hi - tol).astype(float)
        return n

    def _boundary_normal(self, x):
        gap_lo = x - self.lo
        gap_hi = self.hi - x
        gap = np.minimum(gap_lo, gap_hi)
        nearest = gap <= gap.min(axis=1, keepdims=True) + BOUNDARY_TOL
        sign = np.where(gap_lo <= gap_hi, 1.0, -1.0)
        n = nearest * sign
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def _smooth_normal(self, x):
        if self.dim == 1:
            mid = 0.5 * (self.lo + self.hi)
            return (mid - x) / (0.5 * (self.hi - self.lo))
        return None

    def _sample_boundary(self, count, gen):
        d = self.dim
        width = self.hi - self.lo
        if d == 1:
            pick = gen.integers(0, 2, size=count)
            return np.where(pick[:, None] == 0, self.lo, self.hi).astype(float)
        areas = np.array([np.prod(np.delete(width, i)) for i in range(d)])
        axis = gen.choice(d, size=count, p=areas / areas.sum())
        side = gen.integers(0, 2, size=count)
        pts = self.lo + gen.random((count, d)) * width
        rows = np.arange(count)
        pts[rows, axis] = np.where(side == 0, self.lo[axis], self.hi[axis])
        return pts

    def to_dict(self):
        return {"variant": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True, eq=False)
class HalfspaceIntersection:
    """Bounded polytope ``{x : <a_i, x> < c_i}`` with unit outward normals ``a_i``.

    Projection runs Dykstra's cyclic algorithm and then snaps to the exact
    projection on the detected active faces.
    """

    normals: np.ndarray
    offsets: np.ndarray
    tol: float = 1e-10
    max_iter: int = 10_000
    _box: tuple = field(init=False, repr=False)

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.normals, dtype=float))
        c = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        if a.shape[0] != c.size:
            raise ValueError("one offset per normal required")
        if not np.allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12):
            raise ValueError("normals must be unit vectors")
        object.__setattr__(self, "normals", a)
        object.__setattr__(self, "offsets", c)
        object.__setattr__(self, "_box", self._compute_box())

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    def _compute_box(self):
        from scipy.optimize import linprog

        d = self.dim
        lo, hi = np.empty(d), np.empty(d)
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            for sgn, store in ((1.0, lo), (-1.0, hi)):
                res = linprog(sgn * e, A_ub=self.normals, b_ub=self.offsets, bounds=[(None, None)] * d)
                if res.status == 3:
                    raise ValueError("half-space intersection is unbounded")
                if not res.success:
                    raise ValueError("half-space intersection is empty")
                store[i] = res.x[i]
        if np.any(hi - lo <= 0):
            raise ValueError("half-space intersection needs a nonempty interior")
        return lo, hi

    def bounding_box(self):
        return self._box[0].copy(), self._box[1].copy()

    def _project(self, x):
        a, c = self.normals, self.offsets
        out = x.copy()
        outside = np.any(x @ a.T > c, axis=1)
        if not outside.any():
            return out
        y = x[outside]
        inc = np.zeros((a.shape[0],) + y.shape)
        for _ in range(self.max_iter):
            prev = y.copy()
            for i in range(a.shape[0]):
                z = y + inc[i]
                viol = np.maximum(z @ a[i] - c[i], 0.0)
                y = z - viol[:, None] * a[i]
                inc[i] = z - y
            if np.max(np.abs(y - prev)) < self.tol:
                break
        else:
            raise ProjectionError(
                f"Dykstra projection did not converge to {self.tol:g} in {self.max_iter} cycles"
            )
        out[outside] = self._polish(x[outside], y)
        return out

    def _polish(self, x, y):
        # exact projection onto the affine hull of the active faces
        a, c = self.normals, self.offsets
        res = y.copy()
        active = y @ a.T >= c - 1e-7
        for pattern in np.unique(active, axis=0):
            rows = np.all(active == pattern, axis=1)
            if not pattern.any():
                continue
            A = a[pattern]
            lam, *_ = np.linalg.lstsq(A @ A.T, (x[rows] @ A.T - c[pattern]).T, rcond=None)
            cand = x[rows] - (A.T @ lam).T
            ok = np.all(lam >= -1e-12, axis=0) & np.all(cand @ a.T <= c + 1e-12, axis=1)
            ok &= np.linalg.norm(cand - y[rows], axis=1) < 1e-6
            sub = res[rows]
            sub[ok] = cand[ok]
            res[rows] = sub
        for _ in range(64):
            viol = res @ a.T - c
            if not np.any(viol > 0):
                break
            step = np.maximum(viol, 0.0) + 4e-16 * (1.0 + np.abs(c))
            res -= ((viol > 0) * step) @ a
        return res

    def _depth(self, x):
        return (self.offsets - x @ self.normals.T).min(axis=1)

    def _face_normals(self, x, tol):
        act = (x @ self.normals.T >= self.offsets - tol).astype(float)
        return -(act @ self.normals)

    def _boundary_normal(self, x):
        gap = self.offsets - x @ self.normals.T
        nearest = gap <= gap.min(axis=1, keepdims=True) + BOUNDARY_TOL
        n = -(nearest.astype(float) @ self.normals)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def _smooth_normal(self, x):
        return None

    def _sample_boundary(self, count, gen):
        lo, hi = self._box
        inner = sample_points(self, count, "interior", gen)
        u = gen.standard_normal((count, self.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        rate = u @ self.normals.T
        gap = self.offsets - inner @ self.normals.T
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(rate > 0, gap / rate, np.inf)
        return inner + s.min(axis=1)[:, None] * u

    def to_dict(self):
        return {
            "variant": "halfspaces",
            "normals": self.normals.tolist(),
            "offsets": self.offsets.tolist(),
        }


ConvexDomainSpec = Ball | Box | HalfspaceIntersection


def domain_from_dict(spec: dict) -> ConvexDomainSpec:
    kind = spec.get("variant")
    if kind == "ball":
        return Ball(spec["center"], spec["radius"])
    if kind == "box":
        return Box(spec["lo"], spec["hi"])
    if kind == "halfspaces":
        return HalfspaceIntersection(spec["normals"], spec["offsets"])
    raise ValueError(f"unknown domain variant {kind!r}")


@dataclass(frozen=True)
class BoundaryData:
    projection: np.ndarray
    distance: np.ndarray
    inward_normal: np.ndarray


def project(domain: ConvexDomainSpec, x) -> np.ndarray:
    """Euclidean projection onto the closed domain."""
    xb, single = _as_batch(x)
    return _unbatch(domain._project(xb), single)


def penalty_delta(domain: ConvexDomainSpec, x) -> np.ndarray:
    """Gradient of the squared distance, ``2 (x - project(x))``."""
    xb, single = _as_batch(x)
    return _unbatch(2.0 * (xb - domain._project(xb)), single)


def distance(domain: ConvexDomainSpec, x):
    xb, single = _as_batch(x)
    return _unbatch(np.linalg.norm(xb - domain._project(xb), axis=1), single)


def contains(domain: ConvexDomainSpec, x):
    """True on the closed domain."""
    xb, single = _as_batch(x)
    return _unbatch(np.all(domain._project(xb) == xb, axis=1), single)


def boundary_distance(domain: ConvexDomainSpec, x):
    """Distance to the boundary: depth inside, distance to the domain outside."""
    xb, single = _as_batch(x)
    p = domain._project(xb)
    out = np.linalg.norm(xb - p, axis=1)
    inside = out == 0
    out[inside] = np.maximum(domain._depth(xb[inside]), 0.0)
    return _unbatch(out, single)


def inward_normal(domain: ConvexDomainSpec, x, tol: float = BOUNDARY_TOL) -> np.ndarray:
    """Unit inward normal on the boundary, ``-delta/|delta|`` outside.

    On flat-faced domains the normals of all faces active within ``tol`` are
    averaged and renormalized. Raises :class:`InteriorPointError` for points
    deeper than ``tol`` inside the domain.
    """
    xb, single = _as_batch(x)
    p = domain._project(xb)
    disp = xb - p
    dist = np.linalg.norm(disp, axis=1)
    out = np.empty_like(xb)
    outside = dist > 0
    out[outside] = -disp[outside] / dist[outside, None]
    inside = ~outside
    if inside.any():
        xi = xb[inside]
        if np.any(domain._depth(xi) > tol):
            raise InteriorPointError("inward normal is undefined away from the boundary")
        if isinstance(domain, Ball):
            n = (domain.center - xi) / domain.radius
        else:
            n = domain._face_normals(xi, tol)
        out[inside] = n / np.linalg.norm(n, axis=1, keepdims=True)
    return _unbatch(out, single)


def normal_extension(domain: ConvexDomainSpec, x) -> np.ndarray:
    """A normal field defined everywhere that agrees with the inward normal on the boundary.

    Balls and intervals get the affine field ``(center - x) / half_width``,
    which is Lipschitz on all of R^d. Other domains use ``-delta/|delta|``
    outside and the nearest-face normal inside, which jumps across the
    medial axis.
    """
    xb, single = _as_batch(x)
    smooth = domain._smooth_normal(xb)
    if smooth is not None:
        return _unbatch(smooth, single)
    p = domain._project(xb)
    disp = xb - p
    dist = np.linalg.norm(disp, axis=1)
    out = domain._boundary_normal(xb)
    outside = dist > 0
    out[outside] = -disp[outside] / dist[outside, None]
    return _unbatch(out, single)


def boundary_data(domain: ConvexDomainSpec, x) -> BoundaryData:
    p = project(domain, x)
    return BoundaryData(p, distance(domain, x), inward_normal(domain, x))


def sample_points(domain: ConvexDomainSpec, count: int, region: str, rng_stream=None, shell_width: float = 0.5):
    """Random points in the interior, on the boundary or in an exterior shell.

    Exterior-shell points lie at distance in ``(0, shell_width]`` from the domain.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    gen = as_generator(rng_stream)
    if region == "interior":
        lo, hi = domain.bounding_box()
        got = []
        need = count
        while need > 0:
            cand = lo + gen.random((max(2 * need, 64), domain.dim)) * (hi - lo)
            cand = cand[domain._depth(cand) > 0]
            got.append(cand[:need])
            need -= len(got[-1])
        return np.concatenate(got)
    if region == "boundary":
        return domain._sample_boundary(count, gen)
    if region == "exterior-shell":
        base = domain._sample_boundary(count, gen)
        if isinstance(domain, Ball):
            outward = (base - domain.center) / domain.radius
        else:
            outward = -domain._face_normals(base, 1e-9)
            outward /= np.linalg.norm(outward, axis=1, keepdims=True)
        s = shell_width * (1.0 - gen.random(count))
        return base + s[:, None] * outward
    raise ValueError(f"unknown region {region!r}")
