import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from penbsde import geometry as G

S2 = 1 / np.sqrt(2)
TRIANGLE = G.HalfspaceIntersection([[-1, 0], [0, -1], [S2, S2]], [0, 0, S2])
DOMAINS = {
    "ball": G.Ball([0.0, 0.0], 1.0),
    "box": G.Box([0.0, -1.0], [1.0, 2.0]),
    "triangle": TRIANGLE,
}


@pytest.fixture(scope="module")
def lattice():
    # grid oracle: every point of a 1e-3 lattice lying in the closed triangle
    h = 1e-3
    i, j = np.meshgrid(np.arange(1001), np.arange(1001), indexing="ij")
    keep = (i + j) <= 1000
    return np.stack([i[keep] * h, j[keep] * h], axis=1)


def _oracle(lattice, q):
    d = np.linalg.norm(lattice - q, axis=1)
    k = np.argmin(d)
    return lattice[k], d[k]


def test_ball_examples():
    b = G.Ball([0.0, 0.0], 1.0)
    np.testing.assert_array_equal(G.project(b, [2.0, 0.0]), [1.0, 0.0])
    np.testing.assert_array_equal(G.penalty_delta(b, [2.0, 0.0]), [2.0, 0.0])
    assert G.distance(b, [2.0, 0.0]) == 1.0
    assert G.distance(b, [0.3, 0.1]) == 0.0
    np.testing.assert_array_equal(G.inward_normal(b, [2.0, 0.0]), [-1.0, 0.0])


def test_box_examples():
    b = G.Box([0.0], [1.0])
    assert G.project(b, [0.4])[0] == 0.4
    assert G.penalty_delta(b, [1.25])[0] == 0.5
    np.testing.assert_array_equal(G.penalty_delta(b, [0.7]), [0.0])
    assert G.inward_normal(b, [0.0])[0] == 1.0
    sq = G.Box([0.0, 0.0], [1.0, 1.0])
    np.testing.assert_allclose(G.inward_normal(sq, [0.0, 0.0]), [S2, S2], atol=1e-15)


def test_triangle_oracle_example(lattice):
    p = G.project(TRIANGLE, [1.0, 1.0])
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-12)
    assert abs(G.distance(TRIANGLE, [1.0, 1.0]) - np.sqrt(0.5)) < 1e-12
    z, d = _oracle(lattice, np.array([1.0, 1.0]))
    assert np.linalg.norm(p - z) <= 2e-3
    assert abs(G.distance(TRIANGLE, [1.0, 1.0]) - d) <= 2e-3


def test_triangle_matches_grid_oracle(lattice, gen):
    q = gen.uniform(-1.0, 2.0, (100, 2))
    p = G.project(TRIANGLE, q)
    for qi, pi in zip(q, p):
        z, _ = _oracle(lattice, qi)
        assert np.linalg.norm(pi - z) <= 2e-3


@pytest.mark.parametrize("name", list(DOMAINS))
def test_property_suite(name, gen):
    dom = DOMAINS[name]
    m = 10_000
    lo, hi = dom.bounding_box()
    x = gen.uniform(lo - 1.5, hi + 1.5, (m, dom.dim))
    y = gen.uniform(lo - 1.5, hi + 1.5, (m, dom.dim))
    z = np.concatenate([G.sample_points(dom, m // 2, "interior", gen), G.project(dom, y[: m - m // 2])])
    dx, dy = G.penalty_delta(dom, x), G.penalty_delta(dom, y)
    assert np.max(np.sum((z - x) * dx, axis=1)) <= 1e-12
    gap = np.linalg.norm(x - y, axis=1)
    assert np.all(np.linalg.norm(dx - dy, axis=1) <= 4 * gap + 1e-12)
    px, py = G.project(dom, x), G.project(dom, y)
    np.testing.assert_array_equal(G.project(dom, px), px)
    assert np.all(np.linalg.norm(px - py, axis=1) <= gap + 1e-12)
    assert G.contains(dom, px).all()
    # <grad l, delta> = -|delta| with the exterior extension
    out = G.distance(dom, x) > 0
    n = G.inward_normal(dom, x[out])
    np.testing.assert_allclose(np.sum(n * dx[out], axis=1), -np.linalg.norm(dx[out], axis=1), rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("name", list(DOMAINS))
def test_sample_regions(name, gen):
    dom = DOMAINS[name]
    inner = G.sample_points(dom, 500, "interior", gen)
    assert G.contains(dom, inner).all()
    bd = G.sample_points(dom, 500, "boundary", gen)
    assert np.all(G.boundary_distance(dom, bd) < 1e-9)
    shell = G.sample_points(dom, 500, "exterior-shell", gen, shell_width=0.3)
    dist = G.distance(dom, shell)
    assert np.all(dist > 0) and np.all(dist <= 0.3 + 1e-12)
    n = G.inward_normal(dom, G.project(dom, bd))
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)


def test_deep_interior_normal_rejected():
    with pytest.raises(G.InteriorPointError):
        G.inward_normal(G.Ball([0.0, 0.0], 1.0), [0.1, 0.0])


def test_projection_nonconvergence_is_explicit():
    thin = G.HalfspaceIntersection([[-1, 0], [0, -1], [S2, S2]], [0, 0, S2], tol=1e-16, max_iter=1)
    with pytest.raises(G.ProjectionError):
        G.project(thin, [3.0, -2.0])


def test_invalid_domains():
    with pytest.raises(ValueError):
        G.Ball([0.0], 0.0)
    with pytest.raises(ValueError):
        G.Box([1.0], [0.0])
    with pytest.raises(ValueError):
        G.HalfspaceIntersection([[2.0, 0.0]], [1.0])
    with pytest.raises(ValueError):  # unbounded
        G.HalfspaceIntersection([[1.0, 0.0]], [1.0])
    with pytest.raises(ValueError):  # empty
        G.HalfspaceIntersection([[1.0, 0.0], [-1.0, 0.0], [0, 1.0], [0, -1.0]], [-1.0, -1.0, 1.0, 1.0])


@pytest.mark.parametrize("name", list(DOMAINS))
def test_dict_round_trip(name):
    dom = DOMAINS[name]
    again = G.domain_from_dict(dom.to_dict())
    q = np.array([[3.0, -2.0], [0.2, 0.1]])
    np.testing.assert_array_equal(G.project(again, q), G.project(dom, q))


def test_normal_extension_agrees_on_boundary(gen):
    ball = DOMAINS["ball"]
    bd = G.project(ball, G.sample_points(ball, 300, "boundary", gen))
    np.testing.assert_allclose(G.normal_extension(ball, bd), G.inward_normal(ball, bd), atol=1e-12)
    box = G.Box([0.0], [1.0])
    np.testing.assert_allclose(G.normal_extension(box, [[0.0], [1.0], [0.5]]), [[1.0], [-1.0], [0.0]])
    # exterior points: minus the normalized penalty vector
    out = G.sample_points(TRIANGLE, 200, "exterior-shell", gen)
    d = G.penalty_delta(TRIANGLE, out)
    np.testing.assert_allclose(G.normal_extension(TRIANGLE, out), -d / np.linalg.norm(d, axis=1)[:, None])


points = hnp.arrays(np.float64, 2, elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(points, points)
def test_hypothesis_projection_properties(x, y):
    for dom in DOMAINS.values():
        px = G.project(dom, x)
        z = G.project(dom, y)
        assert G.contains(dom, px)
        np.testing.assert_array_equal(G.project(dom, px), px)
        assert np.dot(z - x, G.penalty_delta(dom, x)) <= 1e-12
        assert np.linalg.norm(px - z) <= np.linalg.norm(x - y) + 1e-12
