
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from heatsdf.pointcloud import (DegenerateCloud, NormalizationTransform, ParseError, PointCloud,
                                TooFewPoints, adaptive_weights, adaptive_weights_bruteforce,
                                compute_adaptive_weights, kth_neighbor_distances, load_point_cloud,
                                mollifier, normalize_to_domain, prepare_cloud, save_xyz,
                                select_epsilon)

from conftest import sphere_points

coords = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def clouds(min_n=4, max_n=60):
    return st.integers(min_n, max_n).flatmap(
        lambda n: arrays(np.float64, (n, 3), elements=coords))


# --- loading ------------------------------------------------------------------
def test_xyz_four_points_uniform_weights(tmp_path):
    f = tmp_path / "c.xyz"
    f.write_text("0 0 0\n1 0 0\n0 1 0\n0 0 1\n")
    pc = load_point_cloud(f)
    assert len(pc) == 4
    np.testing.assert_array_equal(pc.weights, 0.25)
    assert pc.epsilon is None


def test_obj_ignores_faces(tmp_path):
    f = tmp_path / "m.obj"
    f.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nvn 0 0 1\nf 1 2 3\nf 1 3 4\n")
    pc = load_point_cloud(f)
    np.testing.assert_array_equal(pc.points, np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]))


def test_empty_file_too_few(tmp_path):
    f = tmp_path / "e.xyz"
    f.write_text("")
    with pytest.raises(TooFewPoints):
        load_point_cloud(f)


def test_parse_error_has_line(tmp_path):
    f = tmp_path / "bad.xyz"
    f.write_text("0 0 0\n1 0 0\n1 x 0\n")
    with pytest.raises(ParseError) as ei:
        load_point_cloud(f)
    assert ei.value.line == 3


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_point_cloud(tmp_path / "nope.xyz")


def test_ply_ascii_and_binary(tmp_path):
    pts = np.random.default_rng(1).normal(size=(6, 3))
    head = "ply\nformat {fmt} 1.0\nelement vertex 6\nproperty float x\nproperty float y\nproperty float z\n" \
           "element face 0\nproperty list uchar int vertex_indices\nend_header\n"
    a = tmp_path / "a.ply"
    a.write_text(head.format(fmt="ascii") + "".join("%r %r %r\n" % tuple(map(float, np.float32(p))) for p in pts))
    b = tmp_path / "b.ply"
    b.write_bytes(head.format(fmt="binary_little_endian").encode() + pts.astype("<f4").tobytes())
    pa, pb = load_point_cloud(a), load_point_cloud(b)
    np.testing.assert_array_equal(pa.points, pts.astype(np.float32).astype(np.float64))
    np.testing.assert_array_equal(pb.points, pa.points)


def test_xyz_roundtrip_exact(tmp_path):
    pts = np.random.default_rng(2).normal(size=(10, 3))
    save_xyz(pts, tmp_path / "r.xyz")
    np.testing.assert_array_equal(load_point_cloud(tmp_path / "r.xyz").points, pts)


# --- normalisation ------------------------------------------------------------
def test_normalize_cube_0_10():
    g = np.array([[x, y, z] for x in (0, 10) for y in (0, 10) for z in (0, 10)], float)
    pc = normalize_to_domain(PointCloud.from_points(g))
    assert pc.transform.scale == pytest.approx(0.2)
    np.testing.assert_allclose(pc.points.min(0), -1)
    np.testing.assert_allclose(pc.points.max(0), 1)


def test_normalize_identity_case():
    g = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    pc = normalize_to_domain(PointCloud.from_points(g))
    np.testing.assert_allclose(pc.points, g, atol=1e-12)


def test_normalize_anisotropic_box():
    g = np.array([[x, y, z] for x in (0, 4) for y in (0, 2) for z in (0, 2)], float)
    pc = normalize_to_domain(PointCloud.from_points(g))
    assert pc.transform.scale == 0.5
    np.testing.assert_allclose(pc.points[:, 0].min(), -1)
    np.testing.assert_allclose(pc.points[:, 1:].max(0), 0.5)


def test_normalize_degenerate():
    with pytest.raises(DegenerateCloud):
        normalize_to_domain(PointCloud.from_points(np.ones((5, 3))))


@given(clouds())
def test_normalize_containment_and_inverse(p):
    pc = PointCloud.from_points(p)
    if np.ptp(p, axis=0).max() == 0:
        return
    n = normalize_to_domain(pc)
    assert np.all(np.abs(n.points) <= 1.0)
    assert np.isclose(np.abs(n.points).max(), 1.0)
    # distance to the boundary of (-1.2, 1.2)^3 is at least 0.2
    assert np.all(1.2 - np.abs(n.points) >= 0.2 - 1e-12)
    back = n.transform.inverse(n.points)
    np.testing.assert_allclose(back, p, atol=1e-12 * max(1.0, np.abs(p).max()) * 10)


def test_transform_dict_roundtrip():
    t = NormalizationTransform(0.37, (0.1, -2.0, 3.5))
    assert NormalizationTransform.from_dict(t.to_dict()) == t


# --- epsilon --------------------------------------------------------------------
def test_epsilon_line():
    p = np.zeros((14, 3))
    p[:, 0] = 0.1 * np.arange(14)
    eps = select_epsilon(PointCloud.from_points(p), 12)
    assert 1.2 - 1e-12 <= eps <= 1.2 * 1.5


def test_epsilon_cluster():
    p = sphere_points(13, radius=0.01, seed=3)
    brute = np.sort(np.linalg.norm(p[:, None] - p[None], axis=2), axis=1)[:, 12].max()
    eps = select_epsilon(PointCloud.from_points(p), 12)
    assert brute <= eps <= 1.05 * brute + 1e-15


def test_epsilon_k0():
    assert select_epsilon(PointCloud.from_points(sphere_points(5)), 0) == np.finfo(float).tiny


@given(clouds(14, 40))
def test_kth_neighbor_matches_bruteforce(p):
    d = np.sort(np.linalg.norm(p[:, None] - p[None], axis=2), axis=1)
    np.testing.assert_allclose(kth_neighbor_distances(p, 12), d[:, 12], rtol=1e-12, atol=1e-300)


# --- weights ----------------------------------------------------------------------
def test_mollifier_support():
    r = np.array([0.0, 0.5, 0.999999, 1.0, 1.5])
    v = mollifier(r, 1.0)
    assert v[0] == pytest.approx(np.exp(-1))
    assert v[3] == 0 and v[4] == 0 and np.all(v >= 0)


def test_isolated_points_equal_weights():
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    np.testing.assert_allclose(adaptive_weights(p, 0.5), 1 / 3, rtol=0, atol=1e-15)


def test_two_coincident_one_isolated():
    p = np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0]], float)
    np.testing.assert_allclose(adaptive_weights(p, 0.5), [0.25, 0.25, 0.5], rtol=0, atol=1e-12)


def fibonacci_sphere(n, r=0.5):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    t = np.pi * (1 + 5**0.5) * i
    s = np.sqrt(1 - z * z)
    return r * np.c_[s * np.cos(t), s * np.sin(t), z]


@pytest.mark.parametrize("eps", [None, 0.05, 0.1, 0.3, 1.0])
def test_uniform_sphere_weight_ratio(eps):
    # evenly spread samples; i.i.d. draws clump and exceed the bound
    pc = compute_adaptive_weights(PointCloud.from_points(fibonacci_sphere(2000)), epsilon=eps)
    assert pc.weights.max() / pc.weights.min() < 1.5


@given(clouds(4, 50), st.floats(0.05, 3.0))
def test_weights_sum_and_bruteforce(p, eps):
    w = adaptive_weights(p, eps)
    assert abs(w.sum() - 1) < 1e-9
    np.testing.assert_allclose(w, adaptive_weights_bruteforce(p, eps), rtol=1e-12, atol=1e-15)


@given(clouds(4, 40), st.floats(0.05, 3.0), st.randoms(use_true_random=False))
def test_weights_permutation_equivariant(p, eps, rnd):
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(adaptive_weights(p[perm], eps), adaptive_weights(p, eps)[perm],
                               rtol=1e-12, atol=1e-15)


@given(clouds(4, 40), st.floats(0.05, 3.0))
def test_weights_duplication_invariance(p, eps):
    w = adaptive_weights(p, eps)
    w2 = adaptive_weights(np.concatenate([p, p]), eps)
    np.testing.assert_allclose(w2[:len(p)] + w2[len(p):], w, rtol=1e-9, atol=1e-12)


def test_accelerated_matches_bruteforce_2000():
    p = sphere_points(2000, seed=5)
    eps = select_epsilon(PointCloud.from_points(p))
    np.testing.assert_allclose(adaptive_weights(p, eps), adaptive_weights_bruteforce(p, eps),
                               rtol=1e-12, atol=1e-15)


def test_prepare_cloud_invariants():
    pc = prepare_cloud(PointCloud.from_points(sphere_points(500) + 3.0))
    assert abs(pc.weights.sum() - 1) < 1e-9 and np.all(pc.weights >= 0)
    assert pc.epsilon > 0
    assert np.abs(pc.points).max() <= 1.0


def test_compute_weights_rejects_bad_eps():
    with pytest.raises(ValueError):
        compute_adaptive_weights(PointCloud.from_points(sphere_points(20)), epsilon=0.0)
