"""Downstream uses of a trained SDF: zero-level-set extraction, CSG, and a
heat flow on the level sets posed as minimising movements."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .neuralfield import Architecture, NeuralField, init_siren
from .pointcloud import DOMAIN_HALF_WIDTH, DOMAIN_VOLUME
from .profiles import eta_delta, mu_sigma
from .sampling import _uniform_open
from .training import TrainSchedule, train


class EmptyLevelSet(ValueError):
    pass


class IoError(OSError):
    pass


@dataclass
class ExtractedMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)


@dataclass
class LevelSetState:
    w: object
    step_index: int = 0
    tau_pde: float = 0.01
    sigma: float = 0.05
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def _eval(phi, X) -> np.ndarray:
    phi = getattr(phi, "phi", phi)  # SdfModel
    return phi.eval(X) if hasattr(phi, "eval") else np.asarray(phi(X), dtype=np.float64)


def _value_and_grad(phi, X, step: float = 1e-6):
    phi = getattr(phi, "phi", phi)
    if hasattr(phi, "value_and_grad"):
        return phi.value_and_grad(X)
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    g = np.empty_like(X)
    for k in range(3):
        e = np.zeros(3)
        e[k] = step
        g[:, k] = (_eval(phi, X + e) - _eval(phi, X - e)) / (2 * step)
    return _eval(phi, X), g


def _grid_axes(resolution: int, bounds):
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), (3,)) for b in bounds)
    return [np.linspace(lo[k], hi[k], resolution) for k in range(3)], (hi - lo) / (resolution - 1), lo


DOMAIN_BOUNDS = (-DOMAIN_HALF_WIDTH, DOMAIN_HALF_WIDTH)


def sample_grid(phi, resolution: int, bounds=DOMAIN_BOUNDS, chunk: int = 1 << 16) -> np.ndarray:
    """Values on ``resolution**3`` nodes spanning the closed box ``bounds``."""
    axes, _, _ = _grid_axes(resolution, bounds)
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(len(X))
    for i in range(0, len(X), chunk):
        out[i:i + chunk] = _eval(phi, X[i:i + chunk])
    return out.reshape((resolution,) * 3)


def marching_cubes(phi, resolution: int = 256, iso: float = 0.0, bounds=DOMAIN_BOUNDS) -> ExtractedMesh:
    """Level set ``phi = iso`` from a ``resolution**3`` node sampling of
    ``bounds`` (the domain cube by default), classic 256-case table."""
    from skimage.measure import marching_cubes as _mc

    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    vol = sample_grid(phi, resolution, bounds)
    if not np.all(np.isfinite(vol)):
        raise ValueError("field has non-finite values on the extraction grid")
    if not (vol.min() < iso < vol.max()):
        raise EmptyLevelSet(f"no sign change of phi - {iso} on the {resolution}^3 grid")
    _, spacing, lo = _grid_axes(resolution, bounds)
    verts, faces, _, _ = _mc(vol, level=iso, spacing=tuple(spacing), method="lorensen")
    return ExtractedMesh(verts + lo, faces)


def mc_spacing(resolution: int, bounds=DOMAIN_BOUNDS) -> float:
    return float(np.max(_grid_axes(resolution, bounds)[1]))


# --- CSG ---------------------------------------------------------------------
class CsgOp(str, Enum):
    UNION = "union"
    INTERSECTION = "intersection"


@dataclass(frozen=True)
class CsgField:
    """Pointwise min (union) or max (intersection). Not a distance field."""

    a: object
    b: object
    op: CsgOp

    def eval(self, X) -> np.ndarray:
        va, vb = _eval(self.a, X), _eval(self.b, X)
        return np.minimum(va, vb) if self.op is CsgOp.UNION else np.maximum(va, vb)

    __call__ = eval

    def value_and_grad(self, X):
        va, ga = _value_and_grad(self.a, X)
        vb, gb = _value_and_grad(self.b, X)
        pick_a = va <= vb if self.op is CsgOp.UNION else va >= vb
        return np.where(pick_a, va, vb), np.where(pick_a[:, None], ga, gb)


def csg_combine(phi1, phi2, op) -> CsgField:
    return CsgField(phi1, phi2, CsgOp(op))


# --- level-set heat flow --------------------------------------------------------
def smoothed_ball(center, radius: float, delta: float = 0.01):
    """Initial data eta_delta(|x - c| - r): about 1 inside the ball, 0 outside."""
    c = np.asarray(center, dtype=np.float64)

    def w0(X):
        return eta_delta(np.linalg.norm(np.asarray(X).reshape(-1, 3) - c, axis=1) - radius, delta)

    return w0


@dataclass(frozen=True)
class BandPool:
    """Fixed uniform points of the band ``mu_sigma(phi) > 0`` with the
    frozen quantities the flow integrand needs."""

    points: np.ndarray
    mu: np.ndarray
    grad_phi: np.ndarray
    target: np.ndarray  # w_k at the points
    weight: float  # quadrature weight of one pool point

    def batch(self, rng, n: int | None):
        if n is None or n >= len(self.points):
            return self.points, self.mu, self.grad_phi, self.target, self.weight
        idx = rng.integers(0, len(self.points), n)
        return (self.points[idx], self.mu[idx], self.grad_phi[idx], self.target[idx],
                self.weight * len(self.points) / n)


def band_pool(phi, w_k, sigma: float, rng, n_candidates: int = 200000,
              renormalize: bool = True, chunk: int = 50000) -> BandPool:
    pts, mus, grads = [], [], []
    for i in range(0, n_candidates, chunk):
        X = _uniform_open(rng, min(chunk, n_candidates - i))
        v = _eval(phi, X)
        keep = np.abs(v) < sigma
        X = X[keep]
        if len(X) == 0:
            continue
        v, g = _value_and_grad(phi, X)
        if renormalize:
            nrm = np.linalg.norm(g, axis=1)
            ok = nrm > 0.5
            g = g.copy()
            g[ok] /= nrm[ok, None]
        m = mu_sigma(v, sigma)
        nz = m > 0
        pts.append(X[nz])
        mus.append(m[nz])
        grads.append(g[nz])
    if not pts or sum(len(p) for p in pts) == 0:
        raise EmptyLevelSet("no samples in the narrow band of phi")
    P = np.concatenate(pts)
    return BandPool(P, np.concatenate(mus), np.concatenate(grads), _eval(w_k, P),
                    DOMAIN_VOLUME / n_candidates)


def _flow_terms(w_v, w_g, pool_target, mu, grad_phi, tau, qw):
    d = w_v - pool_target
    gp = np.einsum("ij,ij->i", grad_phi, w_g)
    integrand = d * d + tau * (np.einsum("ij,ij->i", w_g, w_g) - gp * gp)
    value = float(np.sum(qw * mu * integrand))
    a = qw * mu * 2.0 * d
    b = (qw * mu * tau)[:, None] * (2.0 * w_g - 2.0 * gp[:, None] * grad_phi)
    return value, a, b


def flow_energy(w, pool: BandPool, tau: float) -> float:
    """Band-confined minimising-movement functional of ``w`` on a pool."""
    v, g = _value_and_grad(w, pool.points)
    return _flow_terms(v, g, pool.target, pool.mu, pool.grad_phi, tau, pool.weight)[0]


def flow_loss(w: NeuralField, X, mu, grad_phi, target, tau: float, qw: float, with_grad: bool = True):
    out = {}

    def adj(v, g):
        out["value"], a, b = _flow_terms(v, g, target, mu, grad_phi, tau, qw)
        return a, b

    if with_grad:
        _, _, pg = w.value_grad_and_backprop(X, adj)
        return out["value"], pg
    v, g = w.value_and_grad(X)
    return _flow_terms(v, g, target, mu, grad_phi, tau, qw)[0], None


def surface_heat_flow_step(phi, w_k, tau_pde: float = 0.01, sigma: float = 0.05,
                           schedule: TrainSchedule = TrainSchedule(epochs=5, batches_per_epoch=200, initial_lr=3e-4),
                           seed: int = 0, arch: Architecture | None = None,
                           n_batch: int | None = 2000, n_candidates: int = 200000,
                           renormalize: bool = True, step_index: int = 0):
    """One implicit Euler step of the band-confined level-set heat flow.

    ``w_k`` is a NeuralField (warm start) or a callable (fresh SIREN of
    ``arch``). Returns ``(w_next, report)``; the report compares the
    functional at ``w_next`` with its value at ``w_k`` on a held-out pool.
    """
    if tau_pde <= 0 or sigma <= 0:
        raise ValueError("tau_pde and sigma must be positive")
    train_pool = band_pool(phi, w_k, sigma, np.random.default_rng([seed, step_index, 0]),
                           n_candidates, renormalize)
    held_out = band_pool(phi, w_k, sigma, np.random.default_rng([seed, step_index, 1]),
                         n_candidates, renormalize)
    if isinstance(w_k, NeuralField):
        start = w_k.copy()
    else:
        start = init_siren(arch or Architecture(hidden_dim=64, hidden_layers=2), seed)

    def loss(w, rng):
        X, mu, gp, tgt, qw = train_pool.batch(rng, n_batch)
        return flow_loss(w, X, mu, gp, tgt, tau_pde, qw)

    res = train(start, loss, schedule, seed, stream=10 + step_index)
    w_next = res.field
    before = flow_energy(w_k, held_out, tau_pde)
    after = flow_energy(w_next, held_out, tau_pde)
    scale = float(np.sum(held_out.weight * held_out.mu * held_out.target ** 2))
    report = {"energy_before": before, "energy_after": after, "fidelity_scale": scale,
              "epoch_losses": res.epoch_losses, "band_points": len(train_pool.points)}
    return w_next, report


def run_surface_flow(phi, w0, tau_pde: float = 0.01, steps: int = 5, sigma: float = 0.05,
                     schedule: TrainSchedule = TrainSchedule(epochs=5, batches_per_epoch=200, initial_lr=3e-4),
                     seed: int = 0, arch: Architecture | None = None, **kw) -> list[LevelSetState]:
    states = []
    w = w0
    for k in range(steps):
        w, rep = surface_heat_flow_step(phi, w, tau_pde, sigma, schedule, seed, arch,
                                        step_index=k, **kw)
        states.append(LevelSetState(w, k + 1, tau_pde, sigma, rep))
    return states


def tangential_gradient(grad_phi, grad_w):
    """P grad w with P = Id - n n^T, n = grad phi (taken as given)."""
    gp = np.einsum("ij,ij->i", grad_phi, grad_w)
    return grad_w - gp[:, None] * grad_phi


# --- OBJ -------------------------------------------------------------------------
def export_mesh(mesh: ExtractedMesh, path, fmt: str = "obj"):
    if fmt.lower() != "obj":
        raise ValueError(f"unsupported mesh format {fmt!r}")
    if not np.all(np.isfinite(mesh.vertices)):
        raise ValueError("mesh has non-finite vertices")
    try:
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write("v %.17g %.17g %.17g\n" % tuple(v))
            for t in mesh.triangles:
                fh.write("f %d %d %d\n" % tuple(t + 1))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_obj(path) -> ExtractedMesh:
    verts, tris = [], []
    try:
        with open(path) as fh:
            for line in fh:
                toks = line.split()
                if not toks:
                    continue
                if toks[0] == "v":
                    verts.append([float(t) for t in toks[1:4]])
                elif toks[0] == "f":
                    idx = [int(t.split("/")[0]) for t in toks[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        tris.append([idx[0], idx[k], idx[k + 1]])
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return ExtractedMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                         np.array(tris, dtype=np.int64).reshape(-1, 3))


def vertex_residuals(phi, mesh: ExtractedMesh) -> np.ndarray:
    return np.abs(_eval(phi, mesh.vertices))
