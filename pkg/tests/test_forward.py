import hashlib
import os

import numpy as np
import pytest

from penbsde import forward as F
from penbsde import geometry as G
from penbsde import problems as P


def _still(inst):
    # same domain and data, zero drift and zero noise
    co = P.ForwardCoefficients(
        b=lambda x: np.zeros_like(x), sigma=lambda x: np.zeros((x.shape[0], x.shape[1], x.shape[1])),
        bound_b=0.0, bound_sigma=0.0, ellipticity_alpha=0.0, noise_dim=inst.dim,
    )
    return P.ProblemInstance(inst.name, inst.domain, co, inst.drivers, inst.horizon_T, inst.start_t, inst.start_x)


def test_step_inside_is_plain_euler(heat):
    x, dK, dk = F.step_penalized(heat, 16, [0.4], [0.1], 0.01)
    assert x[0] == pytest.approx(0.5, abs=1e-15) and dk == 0.0 and dK[0] == 0.0


def test_step_closed_form(heat):
    # x~ = 1.5 with n dt = 0.5
    x, dK, dk = F.step_penalized(heat, 50.0, [0.5], [1.0], 0.01)
    assert x[0] == pytest.approx(1.25, abs=1e-15)
    assert dK[0] == pytest.approx(-0.25, abs=1e-15) and dk == pytest.approx(0.25, abs=1e-15)


@pytest.mark.parametrize("n", [1.0, 5.0, 50.0])
def test_step_tracks_penalty_ode(heat, n):
    # explicit Euler with 1000 sub-steps of x' = -2n (x - pi); the implicit
    # one-step contraction agrees with the flow up to O((2 n dt)^2)
    dt = 1e-3
    x, _, _ = F.step_penalized(heat, n, [0.5], [1.0], dt)
    y, h = 1.5, dt / 1000
    for _ in range(1000):
        y -= 2 * n * (y - 1.0) * h
    assert abs(y - x[0]) <= 0.5 * (2 * n * dt) ** 2


def test_step_large_n_approaches_projection(heat):
    x, _, _ = F.step_penalized(heat, 1e12, [0.5], [1.0], 0.01)
    assert abs(x[0] - 1.0) < 1e-9
    xr, dKr, dkr = F.step_reflected(heat, [0.5], [1.0], 0.01)
    assert xr[0] == 1.0 and dKr[0] == -0.5 and dkr == 0.5


def test_step_guards(heat):
    with pytest.raises(ValueError):
        F.step_penalized(heat, 0.5, [0.5], [0.0], 0.01)
    with pytest.raises(ValueError):
        F.step_penalized(heat, 4, [0.5], [0.0], 0.0)
    with pytest.raises(ValueError):
        F.step_reflected(heat, [0.5], [0.0], -1.0)


def _bundle_invariants(b, dom, reflected):
    assert b.k[0] == 0.0 and np.all(np.diff(b.k) >= 0)
    np.testing.assert_array_equal(b.K[0], 0.0)
    dK = np.diff(b.K, axis=0)
    np.testing.assert_allclose(np.linalg.norm(dK, axis=1), np.diff(b.k), atol=1e-12)
    dk = np.diff(b.k)
    if reflected:
        assert G.contains(dom, b.X).all()
        hit = dk > 0
        # projection outputs sit on the boundary up to rounding of the curved ball surface
        assert np.all(G.boundary_distance(dom, b.X[1:][hit]) <= 4 * np.finfo(float).eps)
    else:
        # penalized: increments only where the diffusion substep left the domain
        x_tilde = b.X[1:] - dK
        assert np.all(G.distance(dom, x_tilde[dk > 0]) > 0)


@pytest.mark.parametrize("name", ["neumann-heat-interval", "ball-2d-pure-neumann"])
def test_bundle_invariants(name):
    inst = P.builtin(name)
    grid = F.TimeGrid.for_instance(inst, steps=400)
    pens, ref = F.simulate_coupled(inst, [4, 64], grid, (3, 11))
    _bundle_invariants(ref, inst.domain, True)
    for b in pens:
        _bundle_invariants(b, inst.domain, False)
        np.testing.assert_array_equal(b.noise, ref.noise)
        np.testing.assert_array_equal(b.X[0], inst.start_x)


def test_still_process_constant(heat):
    inst = _still(heat)
    grid = F.TimeGrid.for_instance(inst, steps=50)
    pens, ref = F.simulate_coupled(inst, [4, 256], grid, 5)
    for b in pens + [ref]:
        np.testing.assert_array_equal(b.X, np.broadcast_to(inst.start_x, b.X.shape))
        np.testing.assert_array_equal(b.k, 0.0)
        np.testing.assert_array_equal(b.K, 0.0)


def test_replay_is_bitwise(heat):
    grid = F.TimeGrid.for_instance(heat, steps=100)
    a = F.simulate_penalized(heat, 64, grid, (9, 4))
    b = F.simulate_penalized(heat, 64, grid, (9, 4))
    for f in ("X", "K", "k", "noise"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    ens = F.batch_simulate(heat, 64, grid, 6, 9, keep_increments=True)
    e4 = ens.bundle(4)
    np.testing.assert_array_equal(e4.X, a.X)
    np.testing.assert_array_equal(e4.k, a.k)
    np.testing.assert_array_equal(e4.noise, a.noise)


def test_same_seed_same_ensemble(heat):
    grid = F.TimeGrid.for_instance(heat, steps=20)
    a = F.batch_simulate(heat, None, grid, 2, 77)
    b = F.batch_simulate(heat, None, grid, 2, 77)
    np.testing.assert_array_equal(a.X, b.X)


def _digest(ens, tmp_path, tag):
    p = os.path.join(tmp_path, f"{tag}.csv")
    F.write_path_csv(ens, p)
    with open(p, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def test_worker_count_invariance(affine, tmp_path):
    grid = F.TimeGrid.for_instance(affine, steps=20)
    one = F.batch_simulate(affine, 16, grid, 10_000, 3, workers=1)
    eight = F.batch_simulate(affine, 16, grid, 10_000, 3, workers=8)
    np.testing.assert_array_equal(one.X, eight.X)
    assert _digest(one, tmp_path, "a") == _digest(eight, tmp_path, "b")


def test_reflected_hits_boundary():
    inst = P.builtin("neumann-heat-interval").with_start(0.0, [0.5])
    grid = F.TimeGrid.for_instance(inst, steps=200)
    ens = F.batch_simulate(inst, None, grid, 10_000, 1)
    assert np.mean(ens.dk > 0) > 0
    assert np.mean(ens.k[-1] > 0) > 0.9


def test_reflected_mean_symmetry():
    inst = P.builtin("neumann-heat-interval").with_start(0.0, [0.5])
    grid = F.TimeGrid.for_instance(inst, steps=100)
    ens = F.batch_simulate(inst, None, grid, 100_000, 2)
    xT = ens.X[-1, :, 0]
    assert abs(xT.mean() - 0.5) <= 3 * xT.std(ddof=1) / np.sqrt(xT.size)


def test_uniform_moment_bounds(affine):
    grid = F.TimeGrid.for_instance(affine, steps=200)
    ens = F.batch_simulate_coupled(affine, [4, 16, 64, 256], grid, 2000, 4, keep_increments=True)
    sup_x2 = [np.mean(np.max(np.linalg.norm(e.X, axis=2), axis=0) ** 2) for e in ens]
    assert max(sup_x2) <= (1.0 + 1.0) ** 2
    tv2 = [np.mean(e.k[-1] ** 2) for e in ens]
    assert all(np.isfinite(tv2))
    assert max(tv2) / min(tv2) < 5.0


def test_coupling_distance_shrinks():
    inst = P.builtin("ball-2d-pure-neumann")
    grid = F.TimeGrid.for_instance(inst, steps=200)
    ens = F.batch_simulate_coupled(inst, [4, 16, 64, 256, None], grid, 1000, 8)
    ref = ens[-1]
    d = [np.linalg.norm(e.X - ref.X, axis=2).max(axis=0) for e in ens[:-1]]
    means = [v.mean() for v in d]
    se = [v.std(ddof=1) / np.sqrt(v.size) for v in d]
    for i in range(3):
        assert means[i + 1] <= means[i] + 2 * np.hypot(se[i], se[i + 1])
    assert means[0] > means[-1]


def test_memory_budget(heat):
    grid = F.TimeGrid.for_instance(heat, steps=1000)
    with pytest.raises(F.MemoryBudgetError, match="streaming"):
        F.batch_simulate(heat, None, grid, 100_000, 0, memory_budget=10**6)


def test_grid():
    g = F.TimeGrid(0.5, 1.0, 500)
    assert g.dt == pytest.approx(1e-3)
    assert g.times[0] == 0.5 and g.times[-1] == pytest.approx(1.0) and g.times.size == 501
    with pytest.raises(ValueError):
        F.TimeGrid(1.0, 1.0, 5)
    with pytest.raises(ValueError):
        F.TimeGrid(0.0, 1.0, 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_state_aborts(heat):
    co = P.ForwardCoefficients(
        b=lambda x: np.where(x > 0.6, np.inf, 0.0), sigma=lambda x: np.ones((x.shape[0], 1, 1)),
        bound_b=1.0, bound_sigma=1.0, ellipticity_alpha=1.0, noise_dim=1,
    )
    bad = P.ProblemInstance("bad", heat.domain, co, heat.drivers, 1.0, 0.0, [0.5])
    with pytest.raises(F.NonFiniteStateError, match="step"):
        F.batch_simulate(bad, 4, F.TimeGrid(0.0, 1.0, 100), 100, 0)


def test_path_csv_columns(heat, tmp_path):
    ens = F.batch_simulate(heat, 4, F.TimeGrid.for_instance(heat, steps=3), 2, 0)
    p = os.path.join(tmp_path, "p.csv")
    F.write_path_csv(ens, p)
    lines = open(p).read().splitlines()
    assert lines[0] == "time,path_id,x0,k"
    assert len(lines) == 1 + 2 * 4
