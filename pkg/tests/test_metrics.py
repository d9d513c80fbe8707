import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heatsdf.metrics import (BandSet, ReferenceMesh, SignAmbiguous, band_set_for_mesh,
                             box_mesh, e_eik, e_recon_normal, e_recon_surface, e_sdf, evaluate,
                             icosphere, inside_mask, load_mesh, lower_median, make_band_set,
                             point_triangle_distance, sample_mesh_surface, signed_distance_to_mesh,
                             unsigned_distance, unsigned_distance_bruteforce, write_report_csv)
from heatsdf.oracle import AnalyticShape
from heatsdf.surface_ops import ExtractedMesh, export_mesh


class Field:
    """Analytic field with closed-form gradient."""

    def __init__(self, f, g):
        self.f, self.g = f, g

    def eval(self, X):
        return self.f(X)

    def value_and_grad(self, X):
        return self.f(X), self.g(X)


def sphere_field(scale=1.0, offset=0.0):
    return Field(lambda X: scale * (np.linalg.norm(X, axis=1) - 0.5) + offset,
                 lambda X: scale * X / np.linalg.norm(X, axis=1, keepdims=True))


FACET = 0.5 * (1 - np.cos(np.arctan(1 / 8)))  # generous bound for 1280 faces


# --- ground-truth distance ---------------------------------------------------------
def test_cube_center():
    assert signed_distance_to_mesh(box_mesh(), np.zeros(3)) == pytest.approx(-0.5, abs=1e-15)


def test_vertex_distance_zero():
    m = icosphere(2)
    assert abs(signed_distance_to_mesh(m, m.vertices[7])) < 1e-12


def test_icosphere_point():
    m = icosphere(3)
    assert len(m.faces) == 1280
    assert signed_distance_to_mesh(m, np.array([0.7, 0, 0])) == pytest.approx(0.2, abs=2e-3)


def test_normals_unit_and_outward():
    m = icosphere(2)
    assert np.allclose(np.linalg.norm(m.normals, axis=1), 1, atol=1e-9)
    assert np.all(np.einsum("ij,ij->i", m.normals, m.centers) > 0)


@given(st.integers(0, 10**6))
@settings(max_examples=20)
def test_kdtree_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    m = icosphere(2, radius=rng.uniform(0.2, 0.8), center=rng.uniform(-0.2, 0.2, 3))
    assert len(m.faces) <= 500
    X = rng.uniform(-1.2, 1.2, (50, 3))
    np.testing.assert_array_equal(unsigned_distance(m, X), unsigned_distance_bruteforce(m, X))


def test_point_triangle_regions():
    A, B, C = np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]), np.array([[0.0, 1, 0]])
    cases = {(0.2, 0.2, 0.3): 0.3, (-1, -1, 0): np.sqrt(2), (2, 0, 0): 1.0,
             (0.5, -0.4, 0): 0.4, (1, 1, 0): np.sqrt(0.5), (-0.3, 0.5, 0): 0.3}
    for p, d in cases.items():
        assert point_triangle_distance(np.array([p], float), A, B, C)[0] == pytest.approx(d, abs=1e-15)


@pytest.mark.parametrize("mesh, sign", [
    (icosphere(3), lambda X: np.linalg.norm(X, axis=1) < 0.5),
    (box_mesh(), lambda X: np.abs(X).max(axis=1) < 0.5),
])
def test_sign_agrees_with_analytic(mesh, sign):
    X = np.random.default_rng(1).uniform(-1, 1, (100000, 3))
    if len(mesh.faces) > 12:  # the inscribed polyhedron differs from the sphere by FACET
        X = X[np.abs(np.linalg.norm(X, axis=1) - 0.5) > FACET]
    np.testing.assert_array_equal(inside_mask(mesh, X), sign(X))


def test_sign_through_vertices_and_edges():
    # axis rays from the origin hit the box's diagonal edges; the vote still works
    X = np.array([[0.0, 0.0, 0.0], [0.1, 0.1, 0.1], [0.0, 0.0, 0.9]])
    np.testing.assert_array_equal(inside_mask(box_mesh(), X), [True, True, False])


def test_sign_ambiguous_after_retries():
    m = box_mesh()
    with pytest.raises(SignAmbiguous):
        # every axis ray from the centre meets a face diagonal
        inside_mask(m, np.zeros((1, 3)), max_retries=0)


def test_mesh_obj_load(tmp_path):
    m = icosphere(1)
    export_mesh(ExtractedMesh(m.vertices, m.faces), tmp_path / "m.obj")
    back = load_mesh(tmp_path / "m.obj")
    np.testing.assert_array_equal(back.faces, m.faces)
    np.testing.assert_allclose(back.vertices, m.vertices, rtol=1e-15)
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 -1\n")
    assert load_mesh(tmp_path / "q.obj").faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_surface_samples_on_mesh():
    m = box_mesh()
    X = sample_mesh_surface(m, 2000, seed=2)
    assert np.allclose(np.abs(X).max(axis=1), 0.5)
    # area weighting: every face pair gets about a sixth of the samples
    face = np.argmax(np.abs(X), axis=1) * 2 + (X[np.arange(2000), np.argmax(np.abs(X), axis=1)] > 0)
    assert np.all(np.abs(np.bincount(face, minlength=6) / 2000 - 1 / 6) < 0.03)


# --- metrics -----------------------------------------------------------------------
def test_recon_surface_examples():
    m = icosphere(3)
    zero = Field(lambda X: np.zeros(len(X)), None)
    const = Field(lambda X: np.full(len(X), 0.2), None)
    assert e_recon_surface(zero, m, 1000) == 0
    assert e_recon_surface(const, m, 1000) == pytest.approx(0.04)
    assert e_recon_surface(sphere_field(), m, 5000) <= FACET**2


def test_recon_normal_examples():
    m = icosphere(2)
    n = lambda X: m.normals  # evaluated at face centres
    cases = [(n, 0.0), (lambda X: -m.normals, 2.0),
             (lambda X: np.cross(m.normals, m.normals[:, [1, 2, 0]] + 0.1), 1.0)]
    for g, expect in cases:
        err, excl = e_recon_normal(Field(lambda X: np.zeros(len(X)), g), m)
        assert err == pytest.approx(expect, abs=1e-12) and excl == 0
    err, excl = e_recon_normal(Field(lambda X: np.zeros(len(X)), lambda X: np.zeros((len(X), 3))), m)
    assert excl == len(m.faces) and np.isnan(err)


def test_sdf_and_eik_examples():
    X = np.random.default_rng(3).uniform(-0.6, 0.6, (1000, 3))
    X = X[np.abs(np.linalg.norm(X, axis=1) - 0.5) < 0.1]
    d = np.linalg.norm(X, axis=1) - 0.5
    exact = sphere_field()
    assert e_sdf(exact, X, d) == pytest.approx(0, abs=1e-15)
    assert e_eik(exact, X) == pytest.approx(0, abs=1e-15)
    double = sphere_field(2.0)
    assert e_eik(double, X) == pytest.approx(1.0)
    assert e_sdf(double, X, d) == pytest.approx(np.mean(np.abs(d)))
    shifted = sphere_field(offset=0.01)
    assert e_sdf(shifted, X, d) == pytest.approx(0.01)
    assert e_eik(shifted, X) == e_eik(exact, X)


def test_lower_median():
    assert lower_median([4, 1, 3, 2]) == 2
    assert lower_median([3, 1, 2]) == 2
    assert lower_median(np.arange(10000)) == 4999


def test_evaluate_deterministic_and_csv(tmp_path):
    m = icosphere(2)
    band = make_band_set(AnalyticShape("sphere").sdf, n=500, seed=4)
    a = evaluate(sphere_field(), m, band, n_surface=2000, seed=4)
    b = evaluate(sphere_field(), m, band, n_surface=2000, seed=4)
    assert a == b
    for v in (a.e_recon_surface, a.e_sdf, a.e_eik):
        assert np.isfinite(v) and v >= 0
    assert 0 <= a.e_recon_normal <= 2
    write_report_csv(tmp_path / "r.csv", [a.as_row("x")])
    head = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert head == "model,e_recon_s,e_recon_n,e_sdf,e_eik,seeds"


def test_band_set_cache(tmp_path):
    m = icosphere(2)
    a = band_set_for_mesh(m, tmp_path, n=300, seed=5)
    files = list(tmp_path.glob("band_*.bin"))
    assert len(files) == 1
    b = band_set_for_mesh(m, tmp_path, n=300, seed=5)
    np.testing.assert_array_equal(a.points, b.points)
    assert np.all(np.abs(a.distances) <= 0.1)
    np.testing.assert_allclose(a.distances, signed_distance_to_mesh(m, a.points))
    c = BandSet.load(files[0])
    assert c.mesh_hash == m.hash()


def test_empty_mesh_rejected():
    with pytest.raises(ValueError):
        ReferenceMesh(np.zeros((3, 3)), np.zeros((0, 3)))
