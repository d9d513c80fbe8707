"""Ground-truth signed distance to triangle meshes and the four error metrics."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .training import _read_container, _write_container


class SignAmbiguous(RuntimeError):
    pass


@dataclass
class ReferenceMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) == 0:
            raise ValueError("mesh has no faces")
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        self.double_areas = np.linalg.norm(n, axis=1)
        self.normals = n / np.maximum(self.double_areas, 1e-300)[:, None]
        self.centers = tri.mean(axis=1)
        self._tree = None
        self._radius = None

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.vertices.astype("<f8").tobytes())
        h.update(self.faces.astype("<i8").tobytes())
        return h.hexdigest()

    def transformed(self, tf) -> "ReferenceMesh":
        return ReferenceMesh(tf.apply(self.vertices), self.faces)


def load_mesh(path) -> ReferenceMesh:
    """OBJ reader: ``v`` and ``f`` lines (polygons fan-triangulated, ``v/vt/vn``
    index syntax accepted, negative indices resolved)."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            toks = line.split()
            if not toks:
                continue
            if toks[0] == "v":
                verts.append([float(t) for t in toks[1:4]])
            elif toks[0] == "f":
                idx = []
                for t in toks[1:]:
                    i = int(t.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return ReferenceMesh(np.array(verts), np.array(faces))


# --- distance ---------------------------------------------------------------
def point_triangle_distance(P, A, B, C) -> np.ndarray:
    """Exact Euclidean distance between points and triangles (row-paired),
    via the Voronoi-region closest-point construction."""
    ab, ac, ap = B - A, C - A, P - A
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = P - B
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = P - C
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    closest = np.empty_like(P)
    done = np.zeros(len(P), dtype=bool)

    def put(cond, value):
        nonlocal done
        c = cond & ~done
        if c.any():
            closest[c] = value[c] if value.ndim == 2 else value
            done |= c

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), A)
        put((d3 >= 0) & (d4 <= d3), B)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), A + v[:, None] * ab)
        put((d6 >= 0) & (d5 <= d6), C)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), A + w[:, None] * ac)
        w2 = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), B + w2[:, None] * (C - B))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(P), dtype=bool), A + v[:, None] * ab + w[:, None] * ac)
    return np.linalg.norm(P - closest, axis=1)


def unsigned_distance_bruteforce(mesh: ReferenceMesh, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles
    F = len(tri)
    out = np.empty(len(X))
    for i, x in enumerate(X):
        P = np.broadcast_to(x, (F, 3))
        out[i] = point_triangle_distance(P, tri[:, 0], tri[:, 1], tri[:, 2]).min()
    return out


def unsigned_distance(mesh: ReferenceMesh, X, chunk: int = 2048) -> np.ndarray:
    """Exact distance using a KD-tree over face centroids: any triangle within
    ``ub`` of ``x`` has its centroid within ``ub + r_max`` (r_max the largest
    centroid-to-vertex radius), so the candidate set is complete."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles
    if mesh._tree is None:
        mesh._tree = cKDTree(mesh.centers)
        mesh._radius = float(np.linalg.norm(tri - mesh.centers[:, None, :], axis=2).max())
    tree, rmax = mesh._tree, mesh._radius
    out = np.empty(len(X))
    k = min(8, len(tri))
    for s in range(0, len(X), chunk):
        Xc = X[s:s + chunk]
        _, near = tree.query(Xc, k=k)
        near = np.asarray(near).reshape(len(Xc), k)
        P = np.repeat(Xc, k, axis=0)
        t = tri[near.ravel()]
        ub = point_triangle_distance(P, t[:, 0], t[:, 1], t[:, 2]).reshape(len(Xc), k).min(axis=1)
        cands = tree.query_ball_point(Xc, ub + rmax + 1e-12)
        lens = np.array([len(c) for c in cands])
        qi = np.repeat(np.arange(len(Xc)), lens)
        fi = np.concatenate([np.asarray(c, dtype=np.int64) for c in cands])
        t = tri[fi]
        d = point_triangle_distance(Xc[qi], t[:, 0], t[:, 1], t[:, 2])
        best = np.full(len(Xc), np.inf)
        np.minimum.at(best, qi, d)
        out[s:s + chunk] = np.minimum(best, ub)
    return out


def _ray_crossings(mesh: ReferenceMesh, X, direction, tol=1e-12, chunk: int = 4096):
    """Crossing counts of rays ``x + t*direction`` (t > 0) with all faces, and
    a flag for rays that graze an edge or vertex. Moeller-Trumbore on the
    (point, face) pairs whose bounding boxes can meet the ray."""
    tri = mesh.triangles
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    d = np.asarray(direction, dtype=np.float64)
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    usable = np.abs(det) > 1e-300
    inv = np.where(usable, 1.0 / np.where(usable, det, 1.0), 0.0)
    lo = tri.min(axis=1) - 1e-9
    hi = tri.max(axis=1) + 1e-9
    # the ray stays in the half-space beyond x along each axis it moves on
    pos, neg, flat = d > 0, d < 0, d == 0
    counts = np.zeros(len(X), dtype=np.int64)
    ambiguous = np.zeros(len(X), dtype=bool)
    for s in range(0, len(X), chunk):
        Xc = X[s:s + chunk]
        cand = np.ones((len(Xc), len(tri)), dtype=bool)
        for k in range(3):
            xk = Xc[:, k:k + 1]
            if flat[k]:
                cand &= (lo[:, k] <= xk) & (xk <= hi[:, k])
            elif pos[k]:
                cand &= hi[:, k] >= xk
            elif neg[k]:
                cand &= lo[:, k] <= xk
        ci, fi = np.nonzero(cand)
        tvec = Xc[ci] - tri[fi, 0]
        u = np.einsum("ij,ij->i", tvec, pvec[fi]) * inv[fi]
        qvec = np.cross(tvec, e1[fi])
        v = (qvec @ d) * inv[fi]
        t = np.einsum("ij,ij->i", e2[fi], qvec) * inv[fi]
        hit = usable[fi] & (u >= -tol) & (v >= -tol) & (u + v <= 1 + tol) & (t > tol)
        graze = hit & ((np.abs(u) <= tol) | (np.abs(v) <= tol) | (np.abs(1 - u - v) <= tol))
        counts[s:s + chunk] = np.bincount(ci[hit], minlength=len(Xc))
        ambiguous[s:s + chunk] = np.bincount(ci[graze], minlength=len(Xc)) > 0
    return counts, ambiguous


def inside_mask(mesh: ReferenceMesh, X, seed: int = 0, max_retries: int = 10) -> np.ndarray:
    """Majority vote of three axis-ray parities; rays grazing edges/vertices
    abstain, and all-abstaining points are retried with jittered directions."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    votes = np.zeros(len(X), dtype=np.int64)
    valid = np.zeros(len(X), dtype=np.int64)
    for axis in range(3):
        d = np.zeros(3)
        d[axis] = 1.0
        c, amb = _ray_crossings(mesh, X, d)
        votes += np.where(amb, 0, c % 2)
        valid += ~amb
    result = np.where(valid > 0, 2 * votes > valid, False)
    todo = np.flatnonzero(valid == 0)
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        if len(todo) == 0:
            break
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        c, amb = _ray_crossings(mesh, X[todo], d)
        result[todo[~amb]] = (c[~amb] % 2) == 1
        todo = todo[amb]
    if len(todo):
        raise SignAmbiguous(f"{len(todo)} points could not be classified")
    return result


def signed_distance_to_mesh(mesh: ReferenceMesh, X) -> np.ndarray:
    x = np.asarray(X, dtype=np.float64)
    P = x.reshape(-1, 3)
    d = unsigned_distance(mesh, P)
    d = np.where(inside_mask(mesh, P), -d, d)
    return d[0] if x.ndim == 1 else d


# --- sampling on meshes ---------------------------------------------------
def sample_mesh_surface(mesh: ReferenceMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    rng = np.random.default_rng(seed)
    p = mesh.double_areas / mesh.double_areas.sum()
    f = rng.choice(len(p), size=n, p=p)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    t = mesh.triangles[f]
    return ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
            + (r1 * r2)[:, None] * t[:, 2])


# --- metrics ---------------------------------------------------------------
def _values(phi, X):
    return phi.eval(X) if hasattr(phi, "eval") else np.asarray(phi(X))


def e_recon_surface(phi, mesh: ReferenceMesh, n_samples: int = 50000, seed: int = 0) -> float:
    X = sample_mesh_surface(mesh, n_samples, seed)
    v = _values(phi, X)
    return float(np.mean(v * v))


def e_recon_normal(phi, mesh: ReferenceMesh) -> tuple[float, int]:
    """Cosine distance between mesh face normals and normalised gradients at
    face centres. Returns ``(error, excluded)`` where ``excluded`` counts faces
    with vanishing gradient (NaN error if that is every face)."""
    _, g = phi.value_and_grad(mesh.centers)
    nrm = np.linalg.norm(g, axis=1)
    ok = nrm > 0
    if not ok.any():
        return float("nan"), len(ok)
    cos = np.einsum("ij,ij->i", mesh.normals[ok], g[ok]) / nrm[ok]
    return float(1.0 - cos.mean()), int((~ok).sum())


def e_sdf(phi, band_points, band_distances) -> float:
    return float(np.mean(np.abs(_values(phi, band_points) - band_distances)))


def lower_median(values) -> float:
    """Median; for even counts the lower of the two middle elements."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    return float(v[(len(v) - 1) // 2])


def e_eik(phi, band_points) -> float:
    _, g = phi.value_and_grad(band_points)
    return lower_median(np.abs(1.0 - np.linalg.norm(g, axis=1)))


@dataclass
class MetricsReport:
    e_recon_surface: float
    e_recon_normal: float
    e_sdf: float
    e_eik: float
    n_surface: int = 0
    n_band: int = 0
    n_faces: int = 0
    excluded_faces: int = 0
    seed: int = 0

    def as_row(self, model: str) -> dict:
        return {"model": model, "e_recon_s": repr(self.e_recon_surface),
                "e_recon_n": repr(self.e_recon_normal), "e_sdf": repr(self.e_sdf),
                "e_eik": repr(self.e_eik), "seeds": str(self.seed)}


CSV_COLUMNS = ["model", "e_recon_s", "e_recon_n", "e_sdf", "e_eik", "seeds"]


def evaluate(phi, mesh: ReferenceMesh, band: "BandSet", n_surface: int = 50000, seed: int = 0) -> MetricsReport:
    en, excl = e_recon_normal(phi, mesh)
    return MetricsReport(
        e_recon_surface=e_recon_surface(phi, mesh, n_surface, seed),
        e_recon_normal=en,
        e_sdf=e_sdf(phi, band.points, band.distances),
        e_eik=e_eik(phi, band.points),
        n_surface=n_surface, n_band=len(band.points), n_faces=len(mesh.faces),
        excluded_faces=excl, seed=seed)


def write_report_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CSV_COLUMNS})


# --- persisted band sets ----------------------------------------------------
@dataclass
class BandSet:
    points: np.ndarray
    distances: np.ndarray
    mesh_hash: str = ""
    band: float = 0.1
    seed: int = 0

    def save(self, path):
        """Container with magic ``HSDFBAND``; payload is ``n x 4`` float64
        (x, y, z, signed distance), little-endian, row-major."""
        blob = np.column_stack([self.points, self.distances]).astype("<f8").tobytes()
        _write_container(path, b"HSDFBAND", {"n": len(self.points), "mesh_hash": self.mesh_hash,
                                              "band": self.band, "seed": self.seed}, blob)

    @classmethod
    def load(cls, path) -> "BandSet":
        header, blob = _read_container(path, b"HSDFBAND")
        arr = np.frombuffer(blob, dtype="<f8").reshape(header["n"], 4).astype(np.float64)
        return cls(arr[:, :3].copy(), arr[:, 3].copy(), header["mesh_hash"], header["band"], header["seed"])


def make_band_set(distance_fn, band: float = 0.1, n: int = 10000, seed: int = 0,
                  mesh_hash: str = "") -> BandSet:
    from .sampling import sample_narrow_band
    pts = sample_narrow_band(distance_fn, band, n, np.random.default_rng(seed))
    return BandSet(pts, np.asarray(distance_fn(pts)), mesh_hash, band, seed)


def band_set_for_mesh(mesh: ReferenceMesh, cache_dir=None, band: float = 0.1, n: int = 10000,
                      seed: int = 0) -> BandSet:
    """Generated once per mesh; cached as ``band_<hash16>.bin`` in ``cache_dir``."""
    key = mesh.hash()
    path = Path(cache_dir) / f"band_{key[:16]}.bin" if cache_dir is not None else None
    if path is not None and path.exists():
        bs = BandSet.load(path)
        if bs.mesh_hash == key:
            return bs
    # cheap unsigned prefilter, exact signed distance only on accepted points
    def dist(X):
        d = unsigned_distance(mesh, X)
        out = np.full(len(X), np.inf)
        near = d <= band
        if near.any():
            out[near] = np.where(inside_mask(mesh, X[near]), -d[near], d[near])
        return out

    bs = make_band_set(dist, band, n, seed, key)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        bs.save(path)
    return bs


# --- reference meshes -------------------------------------------------------
def icosphere(subdivisions: int = 3, radius: float = 0.5, center=(0.0, 0.0, 0.0)) -> ReferenceMesh:
    t = (1 + 5**0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    verts = list(v)
    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = np.array(new_faces)
    return ReferenceMesh(np.asarray(center) + radius * np.array(verts), f)


def box_mesh(half=(0.5, 0.5, 0.5)) -> ReferenceMesh:
    h = np.asarray(half, dtype=np.float64)
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float) * h
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return ReferenceMesh(v, f)


def mesh_from_sdf(sdf, resolution: int = 128) -> ReferenceMesh:
    """Reference mesh for an analytic shape via marching cubes."""
    from .surface_ops import marching_cubes
    m = marching_cubes(sdf, resolution)
    return ReferenceMesh(m.vertices, m.triangles)


def report_dict(r: MetricsReport) -> dict:
    return asdict(r)
