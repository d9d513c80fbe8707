"""Independent references: closed-form SDFs with surface samplers, and a
finite-difference backward-Euler heat step on a node grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .pointcloud import DOMAIN_HALF_WIDTH, PointCloud
from .training import _read_container, _write_container


class CgNoConvergence(RuntimeError):
    pass


# --- analytic shapes ---------------------------------------------------------
@dataclass(frozen=True)
class AnalyticShape:
    """``kind`` in {sphere, box, torus, capped_torus, plane}.

    Parameters (defaults in brackets):
      sphere: center [0,0,0], radius [0.5]
      box: half_extents [0.5,0.5,0.5]
      torus (ring in the xy-plane): R [0.5], r [0.2]
      capped_torus (arc in the xy-plane, symmetric about +y): angle [2.0]
          half-aperture in radians, ra [0.6], rb [0.25]
      plane (z = offset): offset [0]
    """

    kind: str
    params: dict = field(default_factory=dict)

    def p(self, key, default):
        return self.params.get(key, default)

    def sdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        X = x.reshape(-1, 3)
        k = self.kind
        if k == "sphere":
            c = np.asarray(self.p("center", (0.0, 0.0, 0.0)))
            d = np.linalg.norm(X - c, axis=1) - self.p("radius", 0.5)
        elif k == "box":
            b = np.asarray(self.p("half_extents", (0.5, 0.5, 0.5)))
            q = np.abs(X) - b
            d = np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)
        elif k == "torus":
            R, r = self.p("R", 0.5), self.p("r", 0.2)
            qx = np.hypot(X[:, 0], X[:, 1]) - R
            d = np.hypot(qx, X[:, 2]) - r
        elif k == "capped_torus":
            th, ra, rb = self.p("angle", 2.0), self.p("ra", 0.6), self.p("rb", 0.25)
            sc = np.array([np.sin(th), np.cos(th)])
            px = np.abs(X[:, 0])
            py = X[:, 1]
            kk = np.where(sc[1] * px > sc[0] * py, px * sc[0] + py * sc[1], np.hypot(px, py))
            d = np.sqrt(np.maximum(np.einsum("ij,ij->i", X, X) + ra * ra - 2.0 * ra * kk, 0.0)) - rb
        elif k == "plane":
            d = X[:, 2] - self.p("offset", 0.0)
        else:
            raise ValueError(f"unknown shape {k!r}")
        return d[0] if x.ndim == 1 else d

    __call__ = sdf

    def value_and_grad(self, x, step: float = 1e-6):
        X = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        v = self.sdf(X)
        g = np.stack([(self.sdf(X + step * e) - self.sdf(X - step * e)) / (2 * step)
                      for e in np.eye(3)], axis=1)
        return v, g

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return _SAMPLERS[self.kind](self, n, rng)


def _unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _s_sphere(s, n, rng):
    return np.asarray(s.p("center", (0.0, 0.0, 0.0))) + s.p("radius", 0.5) * _unit(rng, n)


def _s_box(s, n, rng):
    b = np.asarray(s.p("half_extents", (0.5, 0.5, 0.5)))
    areas = np.array([b[1] * b[2], b[0] * b[2], b[0] * b[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, size=(n, 3)) * b
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = sign * b[axis]
    return pts


def _s_torus(s, n, rng):
    R, r = s.p("R", 0.5), s.p("r", 0.2)
    out = []
    while sum(len(o) for o in out) < n:
        u = rng.uniform(0, 2 * np.pi, n)
        v = rng.uniform(0, 2 * np.pi, n)
        keep = rng.uniform(0, R + r, n) < R + r * np.cos(v)
        u, v = u[keep], v[keep]
        rho = R + r * np.cos(v)
        out.append(np.stack([rho * np.cos(u), rho * np.sin(u), r * np.sin(v)], axis=1))
    return np.concatenate(out)[:n]


def _s_capped_torus(s, n, rng):
    th, ra, rb = s.p("angle", 2.0), s.p("ra", 0.6), s.p("rb", 0.25)
    tube_area = 2 * th * 2 * np.pi * ra * rb
    cap_area = 4 * np.pi * rb * rb  # two hemispheres
    n_tube = rng.binomial(n, tube_area / (tube_area + cap_area))
    tube = []
    while sum(len(t) for t in tube) < n_tube:
        m = max(n_tube, 16)
        psi = rng.uniform(-th, th, m)
        v = rng.uniform(0, 2 * np.pi, m)
        keep = rng.uniform(0, ra + rb, m) < ra + rb * np.cos(v)
        psi, v = psi[keep], v[keep]
        rho = ra + rb * np.cos(v)
        tube.append(np.stack([rho * np.sin(psi), rho * np.cos(psi), rb * np.sin(v)], axis=1))
    tube = np.concatenate(tube)[:n_tube] if n_tube else np.zeros((0, 3))
    n_cap = n - n_tube
    d = _unit(rng, n_cap)
    side = rng.choice([-1.0, 1.0], size=n_cap)
    # cap on the +x end is centred at ra*(sin th, cos th, 0), outward tangent (cos th, -sin th, 0)
    t = np.array([np.cos(th), -np.sin(th), 0.0])
    flip = d @ t < 0
    d[flip] -= 2 * np.outer(d[flip] @ t, t)
    c = ra * np.array([np.sin(th), np.cos(th), 0.0])
    caps = c + rb * d
    caps[:, 0] *= side
    pts = np.concatenate([tube, caps])
    return pts[rng.permutation(n)]


def _s_plane(s, n, rng):
    xy = rng.uniform(-1, 1, size=(n, 2))
    return np.column_stack([xy, np.full(n, s.p("offset", 0.0))])


_SAMPLERS = {"sphere": _s_sphere, "box": _s_box, "torus": _s_torus,
             "capped_torus": _s_capped_torus, "plane": _s_plane}


def analytic_sdf(shape: AnalyticShape, x):
    return shape.sdf(x)


def analytic_sample(shape: AnalyticShape, n: int, mode: str = "uniform", seed: int = 0,
                    noise: float = 0.005) -> PointCloud:
    """On-surface samples. ``nonuniform`` thins with acceptance proportional to
    ``1 + 9*max(0, x1)``; ``noisy`` adds Gaussian offsets along the normal;
    ``sparse`` is uniform (pass a small ``n``)."""
    rng = np.random.default_rng(seed)
    if mode in ("uniform", "sparse"):
        pts = shape.sample_surface(n, rng)
    elif mode == "nonuniform":
        chunks, got = [], 0
        while got < n:
            p = shape.sample_surface(max(n, 1000), rng)
            keep = rng.uniform(0, 10.0, len(p)) < 1.0 + 9.0 * np.maximum(0.0, p[:, 0])
            chunks.append(p[keep])
            got += int(keep.sum())
        pts = np.concatenate(chunks)[:n]
    elif mode == "noisy":
        pts = shape.sample_surface(n, rng)
        _, g = shape.value_and_grad(pts)
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        pts = pts + rng.normal(0.0, noise, size=(n, 1)) * g
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return PointCloud.from_points(pts)


# --- grid heat step ----------------------------------------------------------
@dataclass(frozen=True)
class GridField:
    dims: int
    values: np.ndarray  # (dims, dims, dims), node values
    origin: float = -DOMAIN_HALF_WIDTH
    h: float = 0.0

    @classmethod
    def zeros(cls, dims: int) -> "GridField":
        return cls(dims, np.zeros((dims,) * 3), -DOMAIN_HALF_WIDTH, node_spacing(dims))

    def axes(self):
        return [self.origin + self.h * np.arange(self.dims)] * 3

    def nodes(self) -> np.ndarray:
        ax = self.axes()[0]
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)

    def interpolate(self, x) -> np.ndarray:
        return RegularGridInterpolator(self.axes(), self.values)(np.asarray(x).reshape(-1, 3))

    def gradient(self, x) -> np.ndarray:
        g = np.gradient(self.values, self.h)
        return np.stack([RegularGridInterpolator(self.axes(), gi)(np.asarray(x).reshape(-1, 3))
                         for gi in g], axis=1)

    def save(self, path, extra=None):
        """Binary layout: same container as checkpoints with magic ``HSDFGRID``;
        payload is the C-ordered node array as little-endian float64."""
        header = {"dims": self.dims, "origin": self.origin, "h": self.h, **(extra or {})}
        _write_container(path, b"HSDFGRID", header, self.values.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "GridField":
        header, blob = _read_container(path, b"HSDFGRID")
        d = header["dims"]
        vals = np.frombuffer(blob, dtype="<f8").reshape(d, d, d).astype(np.float64)
        return cls(d, vals, header["origin"], header["h"])


def node_spacing(dims: int) -> float:
    return 2 * DOMAIN_HALF_WIDTH / (dims - 1)


def lumped_mass(dims: int) -> np.ndarray:
    """Dual-cell volumes: h^3 halved once per boundary axis."""
    h = node_spacing(dims)
    w = np.ones(dims)
    w[0] = w[-1] = 0.5
    return h**3 * w[:, None, None] * w[None, :, None] * w[None, None, :]


def stiffness_apply(u: np.ndarray, h: float) -> np.ndarray:
    """K u for the 7-point stencil with natural boundary conditions
    (dual-cell finite volumes: flux face areas halved on boundary planes)."""
    n = u.shape[0]
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    out = np.zeros_like(u)
    for ax in range(3):
        others = [a for a in range(3) if a != ax]
        area = h * np.ones((1, 1, 1))
        for a in others:
            shape = [1, 1, 1]
            shape[a] = n
            area = area * w.reshape(shape)
        diff = np.diff(u, axis=ax) * area  # flux * h (h^2 area / h length)
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[ax] = slice(0, n - 1)
        sl_hi[ax] = slice(1, n)
        out[tuple(sl_lo)] -= diff
        out[tuple(sl_hi)] += diff
    return out


def conjugate_gradient(apply_A, b, tol: float = 1e-10, max_iter: int = 1000, x0=None):
    """Plain CG for SPD ``apply_A``. Returns ``(x, residual_history)``; the
    history holds relative residual norms."""
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply_A(x)
    p = r.copy()
    rr = float(np.vdot(r, r))
    bnorm = float(np.sqrt(np.vdot(b, b))) or 1.0
    hist = [np.sqrt(rr) / bnorm]
    for _ in range(max_iter):
        if hist[-1] <= tol:
            return x, hist
        Ap = apply_A(p)
        alpha = rr / float(np.vdot(p, Ap))
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(np.vdot(r, r))
        hist.append(np.sqrt(rr_new) / bnorm)
        p = r + (rr_new / rr) * p
        rr = rr_new
    if hist[-1] <= tol:
        return x, hist
    raise CgNoConvergence(f"CG stalled at relative residual {hist[-1]:.3e} after {max_iter} iterations")


def deposit(points, weights, dims: int) -> np.ndarray:
    """Trilinear splitting of point masses onto the 8 surrounding nodes."""
    h = node_spacing(dims)
    rel = (np.asarray(points, dtype=np.float64) + DOMAIN_HALF_WIDTH) / h
    i0 = np.clip(np.floor(rel).astype(np.int64), 0, dims - 2)
    f = rel - i0
    b = np.zeros((dims,) * 3)
    w = np.asarray(weights, dtype=np.float64)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c = (np.where(dx, f[:, 0], 1 - f[:, 0]) * np.where(dy, f[:, 1], 1 - f[:, 1])
                     * np.where(dz, f[:, 2], 1 - f[:, 2]))
                np.add.at(b, (i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz), w * c)
    return b


def solve_backward_euler(b: np.ndarray, tau: float, tol: float = 1e-10):
    """Solve (M + tau K) u = b on the node grid. Returns ``(GridField, history)``."""
    dims = b.shape[0]
    h = node_spacing(dims)
    m = lumped_mass(dims)
    u, hist = conjugate_gradient(lambda v: m * v + tau * stiffness_apply(v, h), b,
                                 tol=tol, max_iter=10 * dims)
    return GridField(dims, u, -DOMAIN_HALF_WIDTH, h), hist


def grid_heat_step(pc: PointCloud, tau: float, dims: int = 48, return_history: bool = False):
    if dims < 16:
        raise ValueError("dims must be at least 16")
    b = deposit(pc.points, pc.weights, dims)
    g, hist = solve_backward_euler(b, tau)
    return (g, hist) if return_history else g


# --- comparison --------------------------------------------------------------
def compare_fields(neural, grid: GridField, region) -> dict:
    """Pearson correlation of values and gradient-angle quantiles (degrees)."""
    X = np.asarray(region, dtype=np.float64).reshape(-1, 3)
    if hasattr(neural, "value_and_grad"):
        vn, gn = neural.value_and_grad(X)
    else:
        vn, gn = neural(X), None
    vg = grid.interpolate(X)
    corr = float(np.corrcoef(vn, vg)[0, 1])
    out = {"correlation": corr}
    if gn is not None:
        gg = grid.gradient(X)
        cos = np.einsum("ij,ij->i", gn, gg) / np.maximum(
            np.linalg.norm(gn, axis=1) * np.linalg.norm(gg, axis=1), 1e-300)
        ang = np.degrees(np.arccos(np.clip(cos, -1, 1)))
        out["angle_median"] = float(np.median(ang))
        out["angle_p90"] = float(np.quantile(ang, 0.9))
    return out
