"""Stage 1: a backward-Euler heat step from the weighted surface measure,
posed as a minimising-movement energy, and the near/far blended normals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neuralfield import Architecture, NeuralField, init_siren
from .pointcloud import PointCloud
from .profiles import mu
from .sampling import SurfaceBatch, VolumeBatch, sample_surface, sample_volume
from .training import TrainResult, TrainSchedule, train

TAU_NEAR = 0.005
TAU_FAR = 0.1
KAPPA_FRACTION = 0.6
DEGENERATE_NORM = 1e-12


class DegenerateNormal(ArithmeticError):
    pass


@dataclass(frozen=True)
class HeatSolution:
    u_near: NeuralField
    u_far: NeuralField
    tau: float = TAU_NEAR
    tau_hat: float = TAU_FAR
    kappa: float = 1.0
    near_only: bool = False

    def __post_init__(self):
        if not 0 < self.tau < self.tau_hat:
            raise ValueError("need 0 < tau < tau_hat")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")


def heat_loss(field: NeuralField, vol: VolumeBatch, surf: SurfaceBatch, tau: float,
              with_grad: bool = True):
    """MC estimate of  int u^2 + tau |grad u|^2 dx  -  2 * (mean surface integral of u)."""
    nv = len(vol.points)
    X = np.concatenate([vol.points, surf.points])
    qw = vol.domain_volume / nv

    def adjoints(val, grad):
        a = np.empty(len(X))
        b = np.zeros((len(X), 3))
        a[:nv] = 2.0 * qw * val[:nv]
        b[:nv] = 2.0 * qw * tau * grad[:nv]
        a[nv:] = -2.0 * surf.weights
        return a, b

    if with_grad:
        val, grad, pg = field.value_grad_and_backprop(X, adjoints)
    else:
        val, grad = field.value_and_grad(X)
        pg = None
    vv, gv = val[:nv], grad[:nv]
    value = qw * float(np.sum(vv * vv + tau * np.einsum("ij,ij->i", gv, gv)))
    value -= 2.0 * float(np.dot(surf.weights, val[nv:]))
    return value, pg


def make_heat_objective(pc: PointCloud, tau: float, n_volume: int = 10000,
                        n_surface: int = 10000):
    m = min(len(pc), n_surface)

    def loss(field, rng):
        vol = sample_volume(rng, n_volume)
        surf = sample_surface(pc, rng, m)
        return heat_loss(field, vol, surf, tau)

    return loss


def solve_heat_step(pc: PointCloud, tau: float, schedule: TrainSchedule, seed: int,
                    arch: Architecture = Architecture(), n_volume: int = 10000,
                    n_surface: int = 10000, stream: int = 1) -> TrainResult:
    field = init_siren(arch, seed)
    return train(field, make_heat_objective(pc, tau, n_volume, n_surface), schedule, seed, stream=stream)


def compute_kappa(u_near: NeuralField, centers: np.ndarray, chunk: int = 65536) -> float:
    """0.6 times the largest |u| over the orientation-grid cell centres."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if len(centers) == 0:
        raise ValueError("empty grid")
    m = 0.0
    for i in range(0, len(centers), chunk):
        m = max(m, float(np.abs(u_near.eval(centers[i:i + chunk])).max()))
    return KAPPA_FRACTION * m


def blend_weight(u_near_values, kappa: float):
    """Far-field share beta = mu(u/kappa); values below 0 saturate at 1."""
    return mu(np.asarray(u_near_values) / kappa)


def blended_gradient(heat: HeatSolution, X: np.ndarray):
    """Raw blended heat gradient at ``X`` (before normalisation) and its norm."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    u, gu = heat.u_near.value_and_grad(X)
    if heat.near_only:
        v = gu
    else:
        beta = blend_weight(u, heat.kappa)
        far = beta > 0
        v = gu.copy()
        if far.any():
            _, gf = heat.u_far.value_and_grad(X[far])
            bf = beta[far][:, None]
            v[far] = (1.0 - bf) * gu[far] + bf * gf
    return v, np.linalg.norm(v, axis=1)


def blended_normal(heat: HeatSolution, x) -> np.ndarray:
    """Unit blended raw-gradient direction at a single point (or batch)."""
    x = np.asarray(x, dtype=np.float64)
    v, nrm = blended_gradient(heat, x)
    if np.any(nrm < DEGENERATE_NORM):
        raise DegenerateNormal("blended heat gradient vanishes")
    out = v / nrm[:, None]
    return out[0] if x.ndim == 1 else out


def sdf_target_normals(heat: HeatSolution, X: np.ndarray) -> np.ndarray:
    """Target field for the normal-alignment term: the unsigned-distance
    direction -grad u / |grad u| (blended). Degenerate samples get zero."""
    v, nrm = blended_gradient(heat, X)
    out = np.zeros_like(v)
    ok = nrm >= DEGENERATE_NORM
    out[ok] = -v[ok] / nrm[ok, None]
    return out


def solve_heat(pc: PointCloud, centers: np.ndarray, schedule: TrainSchedule, seed: int,
               arch: Architecture = Architecture(), tau: float = TAU_NEAR,
               tau_hat: float = TAU_FAR, n_volume: int = 10000, n_surface: int = 10000,
               near_only: bool = False):
    """Train the near and far heat fields and compute the blend threshold.

    Returns ``(HeatSolution, {"near": TrainResult, "far": TrainResult})``.
    """
    near = solve_heat_step(pc, tau, schedule, seed, arch, n_volume, n_surface, stream=1)
    far = solve_heat_step(pc, tau_hat, schedule, seed + 1, arch, n_volume, n_surface, stream=2)
    kappa = compute_kappa(near.field, centers)
    heat = HeatSolution(near.field, far.field, tau, tau_hat, kappa, near_only)
    return heat, {"near": near, "far": far}
