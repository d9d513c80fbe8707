import itertools
import math

import numpy as np
import pytest

from heatsdf.oracle import (AnalyticShape, CgNoConvergence, GridField, analytic_sample,
                            analytic_sdf, compare_fields, conjugate_gradient, deposit,
                            grid_heat_step, lumped_mass, node_spacing, solve_backward_euler,
                            stiffness_apply)
from heatsdf.pointcloud import DOMAIN_HALF_WIDTH, PointCloud, compute_adaptive_weights

from conftest import sphere_points


def quilez_capped_torus(p, sc, ra, rb):
    # scalar transcription of the published shader snippet
    x, y, z = abs(p[0]), p[1], p[2]
    if sc[1] * x > sc[0] * y:
        k = x * sc[0] + y * sc[1]
    else:
        k = math.sqrt(x * x + y * y)
    return math.sqrt(x * x + y * y + z * z + ra * ra - 2.0 * ra * k) - rb


# --- analytic shapes ---------------------------------------------------------------
def test_analytic_examples():
    assert analytic_sdf(AnalyticShape("sphere"), np.zeros(3)) == -0.5
    torus = AnalyticShape("torus", {"R": 0.5, "r": 0.2})
    assert analytic_sdf(torus, np.array([0.5, 0, 0.2])) == pytest.approx(0.0, abs=1e-15)
    assert analytic_sdf(AnalyticShape("box"), np.zeros(3)) == -0.5
    assert analytic_sdf(AnalyticShape("plane", {"offset": 0.1}), np.array([3, 2, 0.4])) == pytest.approx(0.3)


def test_capped_torus_dual_transcription():
    th, ra, rb = 2.0, 0.6, 0.25
    shape = AnalyticShape("capped_torus", {"angle": th, "ra": ra, "rb": rb})
    X = np.random.default_rng(0).uniform(-1, 1, (10, 3))
    ref = [quilez_capped_torus(x, (math.sin(th), math.cos(th)), ra, rb) for x in X]
    np.testing.assert_allclose(shape.sdf(X), ref, rtol=0, atol=1e-14)


@pytest.mark.parametrize("kind", ["sphere", "box", "torus", "capped_torus", "plane"])
@pytest.mark.parametrize("mode", ["uniform", "nonuniform", "noisy", "sparse"])
def test_samplers_on_surface(kind, mode):
    shape = AnalyticShape(kind)
    pc = analytic_sample(shape, 500, mode, seed=1)
    assert pc.points.shape == (500, 3)
    d = np.abs(shape.sdf(pc.points))
    assert d.max() < (0.03 if mode == "noisy" else 1e-12)
    assert np.all(np.abs(pc.points) <= 1.0)


def test_nonuniform_density_skew():
    shape = AnalyticShape("sphere")
    u = analytic_sample(shape, 20000, "uniform", seed=2).points
    n = analytic_sample(shape, 20000, "nonuniform", seed=2).points
    assert (n[:, 0] > 0).mean() > 0.75 > (u[:, 0] > 0).mean()


def test_noisy_noise_level():
    shape = AnalyticShape("sphere")
    pc = analytic_sample(shape, 20000, "noisy", seed=3)
    assert np.std(shape.sdf(pc.points)) == pytest.approx(0.005, rel=0.05)


# --- grid solver -------------------------------------------------------------------
def test_deposit_conservation():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-1.2, 1.2, (1000, 3))
    w = rng.dirichlet(np.ones(1000))
    b = deposit(pts, w, 24)
    assert b.sum() == pytest.approx(1.0, abs=1e-14)
    assert b.min() >= 0


def test_center_mass_octahedral_symmetry():
    pc = PointCloud(np.zeros((1, 3)), np.ones(1))
    u = grid_heat_step(pc, 0.005, dims=32).values
    for perm in itertools.permutations(range(3)):
        v = u.transpose(perm)
        for flips in itertools.product((False, True), repeat=3):
            w = v
            for ax, f in enumerate(flips):
                if f:
                    w = np.flip(w, ax)
            assert np.max(np.abs(w - u)) < 1e-9 * np.max(np.abs(u))


def test_tiny_tau_is_mass_inverse():
    pc = PointCloud(np.array([[0.013, -0.21, 0.37]]), np.ones(1))
    dims = 20
    b = deposit(pc.points, pc.weights, dims)
    u = grid_heat_step(pc, 1e-9, dims=dims).values
    ref = b / lumped_mass(dims)
    support = b > 0
    assert support.sum() == 8
    np.testing.assert_allclose(u[support], ref[support], rtol=1e-5)
    assert np.max(np.abs(u[~support])) < 1e-5 * np.max(np.abs(u))


def test_sphere_gradient_is_radial():
    pc = compute_adaptive_weights(PointCloud.from_points(sphere_points(5000, seed=5)))
    g = grid_heat_step(pc, 0.005, dims=48)
    nodes = g.nodes()
    r = np.linalg.norm(nodes, axis=1)
    band = (np.abs(r - 0.5) < 0.1) & (np.abs(r - 0.5) > 0.02)
    grad = np.stack(np.gradient(g.values, g.h), axis=-1).reshape(-1, 3)[band]
    radial = nodes[band] / r[band, None]
    sign = np.sign(r[band] - 0.5)[:, None]  # -grad u points away from the surface
    cos = np.einsum("ij,ij->i", -grad, sign * radial) / np.linalg.norm(grad, axis=1)
    assert np.median(cos) > 0.99


def manufactured_error(dims, tau=0.1):
    h = node_spacing(dims)
    ax = -DOMAIN_HALF_WIDTH + h * np.arange(dims)
    k = np.pi / (2 * DOMAIN_HALF_WIDTH)
    c = np.cos(k * (ax + DOMAIN_HALF_WIDTH))  # zero normal derivative on the boundary
    u = c[:, None, None] * c[None, :, None] * c[None, None, :]
    f = (1 + 3 * tau * k * k) * u
    uh, _ = solve_backward_euler(lumped_mass(dims) * f, tau, tol=1e-13)
    return np.max(np.abs(uh.values - u))


def test_manufactured_second_order():
    ratio = manufactured_error(16) / manufactured_error(32)
    assert 3.2 <= ratio <= 4.8


def test_stiffness_symmetric_and_kernel():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 9, 9, 9))
    h = node_spacing(9)
    assert np.vdot(a, stiffness_apply(b, h)) == pytest.approx(np.vdot(stiffness_apply(a, h), b), rel=1e-12)
    assert np.max(np.abs(stiffness_apply(np.ones((9, 9, 9)), h))) < 1e-14
    assert np.vdot(a, stiffness_apply(a, h)) > 0


def test_cg_residual_monotone_on_heat_system():
    pc = compute_adaptive_weights(PointCloud.from_points(sphere_points(2000, seed=7)))
    _, hist = grid_heat_step(pc, 0.005, dims=32, return_history=True)
    assert hist[-1] <= 1e-10
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_cg_no_convergence():
    b = np.random.default_rng(8).normal(size=(16, 16, 16))
    h = node_spacing(16)
    with pytest.raises(CgNoConvergence):
        conjugate_gradient(lambda v: stiffness_apply(v, h) + 1e-6 * v, b, tol=1e-14, max_iter=3)


def test_dims_minimum():
    with pytest.raises(ValueError):
        grid_heat_step(PointCloud(np.zeros((1, 3)), np.ones(1)), 0.005, dims=8)


def test_grid_save_load(tmp_path):
    g = GridField(16, np.random.default_rng(9).normal(size=(16, 16, 16)), -1.2, node_spacing(16))
    g.save(tmp_path / "g.bin")
    back = GridField.load(tmp_path / "g.bin")
    np.testing.assert_array_equal(back.values, g.values)
    assert (back.dims, back.origin, back.h) == (g.dims, g.origin, g.h)


# --- compare_fields ----------------------------------------------------------------
class Analytic:
    def __init__(self, f):
        self.f = f

    def __call__(self, X):
        return self.f(X)


def test_compare_fields_examples():
    g = GridField.zeros(24)
    nodes = g.nodes()
    f = lambda X: np.sin(2 * X[:, 0]) + X[:, 1] * X[:, 2]
    g = GridField(24, f(nodes).reshape((24,) * 3), g.origin, g.h)
    X = nodes[::7]
    assert compare_fields(Analytic(f), g, X)["correlation"] == pytest.approx(1.0, abs=1e-12)
    assert compare_fields(Analytic(lambda X: -f(X)), g, X)["correlation"] == pytest.approx(-1.0, abs=1e-12)


def test_compare_fields_independent():
    rng = np.random.default_rng(10)
    g = GridField(16, rng.normal(size=(16,) * 3), -1.2, node_spacing(16))
    h = GridField(16, rng.normal(size=(16,) * 3), -1.2, node_spacing(16))
    X = rng.uniform(-1.2, 1.2, (10000, 3))
    assert abs(compare_fields(Analytic(h.interpolate), g, X)["correlation"]) < 0.1


def test_compare_fields_gradient_angles():
    shape = AnalyticShape("sphere")
    g = GridField.zeros(32)
    g = GridField(32, shape.sdf(g.nodes()).reshape((32,) * 3), g.origin, g.h)
    X = np.random.default_rng(11).uniform(-0.9, 0.9, (500, 3))
    X = X[np.linalg.norm(X, axis=1) > 0.2]
    out = compare_fields(shape, g, X)
    assert out["correlation"] > 0.999 and out["angle_median"] < 2.0
