"""Stage 2: fit a signed distance field to the (unoriented) heat normals,
with a surface-fit term and a sign term on the inside/outside cells."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .heatstage import HeatSolution, sdf_target_normals
from .neuralfield import Architecture, NeuralField, init_siren
from .orientation import Label, RegionMask, cells_of
from .pointcloud import PointCloud
from .profiles import eta_delta, eta_delta_prime
from .sampling import SurfaceBatch, VolumeBatch, sample_surface, sample_volume
from .training import TrainSchedule, train


class ConfigInvalid(ValueError):
    pass


@dataclass(frozen=True)
class SdfConfig:
    lambda_fit: float = 100.0
    lambda_B: float = 1.0
    delta: float = 0.005
    use_far_field: bool = True
    # None: full midpoint sums every batch; else cells drawn per side and batch
    region_samples: int | None = None

    def validate(self, h: float | None = None):
        if not (self.lambda_fit > 0 and self.lambda_B > 0 and self.delta > 0):
            raise ConfigInvalid("lambda_fit, lambda_B and delta must be positive")
        if h is not None and 2 * self.delta > h:
            raise ConfigInvalid(f"2δ ≤ h violated: 2*{self.delta} > {h}")
        return self


@dataclass
class SdfModel:
    phi: NeuralField
    config: SdfConfig
    heat_ref: str | None = None
    report: dict = field(default_factory=dict)


# --- individual loss terms: each returns (value, value_adj, grad_adj) ----------
def _normal_terms(phi_v, phi_g, n, delta, qw):
    e = eta_delta(phi_v, delta)
    gn = np.einsum("ij,ij->i", phi_g, n)
    integrand = (np.einsum("ij,ij->i", phi_g, phi_g) + np.einsum("ij,ij->i", n, n)
                 + 2.0 * (2.0 * e - 1.0) * gn)
    a = qw * 4.0 * eta_delta_prime(phi_v, delta) * gn
    b = qw * 2.0 * (phi_g + (2.0 * e - 1.0)[:, None] * n)
    return float(np.sum(qw * integrand)), a, b


def _fit_terms(phi_v, weights):
    return float(np.dot(weights, phi_v * phi_v)), 2.0 * weights * phi_v


def _region_terms(phi_v, inside, scale_in, scale_out, delta):
    e = eta_delta(phi_v, delta)
    ep = eta_delta_prime(phi_v, delta)
    value = scale_in * float(np.sum((1.0 - e)[inside])) + scale_out * float(np.sum(e[~inside]))
    a = np.where(inside, -scale_in * ep, scale_out * ep)
    return value, a


def normal_loss(phi: NeuralField, n_star: np.ndarray, vol: VolumeBatch, delta: float,
                with_grad: bool = True):
    """MC estimate of  int eta_d(phi)|grad phi + n|^2 + (1-eta_d(phi))|grad phi - n|^2."""
    qw = vol.domain_volume / len(vol.points)
    out = {}

    def adj(v, g):
        out["value"], a, b = _normal_terms(v, g, n_star, delta, qw)
        return a, b

    if with_grad:
        _, _, pg = phi.value_grad_and_backprop(vol.points, adj)
        return out["value"], pg
    v, g = phi.value_and_grad(vol.points)
    return _normal_terms(v, g, n_star, delta, qw)[0], None


def fit_loss(phi: NeuralField, surf: SurfaceBatch, with_grad: bool = True):
    """Weighted mean of phi^2 over the surface batch."""
    v = phi.eval(surf.points)
    value, a = _fit_terms(v, surf.weights)
    return value, (phi.backprop(surf.points, a) if with_grad else None)


@dataclass(frozen=True)
class RegionCells:
    inside: np.ndarray
    outside: np.ndarray
    cell_volume: float

    @classmethod
    def from_mask(cls, mask: RegionMask) -> "RegionCells":
        return cls(cells_of(mask, Label.INSIDE), cells_of(mask, Label.OUTSIDE), mask.h**3)

    def batch(self, rng=None, n: int | None = None):
        """Cell centres, inside flags and per-side scales (count-ratio scaled
        when subsampling)."""
        ins, outs = self.inside, self.outside
        s_in = s_out = self.cell_volume
        if n is not None and rng is not None:
            if len(ins) > n:
                s_in *= len(ins) / n
                ins = ins[rng.integers(0, len(ins), n)]
            if len(outs) > n:
                s_out *= len(outs) / n
                outs = outs[rng.integers(0, len(outs), n)]
        X = np.concatenate([ins, outs]).reshape(-1, 3)
        inside = np.zeros(len(X), dtype=bool)
        inside[:len(ins)] = True
        return X, inside, s_in, s_out


def region_loss(phi: NeuralField, cells: RegionCells | RegionMask, delta: float,
                with_grad: bool = True, rng=None, n: int | None = None):
    """Midpoint rule  h^3 sum_inside (1 - eta_d(phi)) + h^3 sum_outside eta_d(phi)."""
    if isinstance(cells, RegionMask):
        cells = RegionCells.from_mask(cells)
    X, inside, s_in, s_out = cells.batch(rng, n)
    if len(X) == 0:
        return 0.0, (np.zeros_like(phi.params) if with_grad else None)
    v = phi.eval(X)
    value, a = _region_terms(v, inside, s_in, s_out, delta)
    return value, (phi.backprop(X, a) if with_grad else None)


def sdf_loss(phi: NeuralField, n_star, vol: VolumeBatch, surf: SurfaceBatch,
             region_X, region_inside, s_in, s_out, config: SdfConfig, with_grad: bool = True):
    """Total objective on one batch with a single forward/backward pass.

    Returns ``(total, grad, terms)`` where ``terms`` has the unweighted
    ``normal``, ``fit`` and ``region`` values.
    """
    nv, ns = len(vol.points), len(surf.points)
    X = np.concatenate([vol.points, surf.points, np.asarray(region_X).reshape(-1, 3)])
    qw = vol.domain_volume / nv
    terms = {}

    def adj(v, g):
        a = np.zeros(len(X))
        b = np.zeros((len(X), 3))
        terms["normal"], a[:nv], b[:nv] = _normal_terms(v[:nv], g[:nv], n_star, config.delta, qw)
        terms["fit"], af = _fit_terms(v[nv:nv + ns], surf.weights)
        a[nv:nv + ns] = config.lambda_fit * af
        if len(X) > nv + ns:
            terms["region"], ar = _region_terms(v[nv + ns:], region_inside, s_in, s_out, config.delta)
            a[nv + ns:] = config.lambda_B * ar
        else:
            terms["region"] = 0.0
        return a, b

    if with_grad:
        _, _, pg = phi.value_grad_and_backprop(X, adj)
    else:
        v, g = phi.value_and_grad(X)
        adj(v, g)
        pg = None
    total = terms["normal"] + config.lambda_fit * terms["fit"] + config.lambda_B * terms["region"]
    return total, pg, terms


def make_sdf_objective(heat: HeatSolution, cells: RegionCells, pc: PointCloud, config: SdfConfig,
                       n_volume: int = 10000, n_surface: int = 10000, trace: list | None = None):
    m = min(len(pc), n_surface)

    def loss(phi, rng):
        vol = sample_volume(rng, n_volume)
        surf = sample_surface(pc, rng, m)
        n_star = sdf_target_normals(heat, vol.points)
        RX, rin, s_in, s_out = cells.batch(rng, config.region_samples)
        total, pg, terms = sdf_loss(phi, n_star, vol, surf, RX, rin, s_in, s_out, config)
        if trace is not None:
            trace.append(terms)
        return total, pg

    return loss


def solve_sdf(heat: HeatSolution, mask: RegionMask, pc: PointCloud, config: SdfConfig,
              schedule: TrainSchedule, seed: int, arch: Architecture = Architecture(),
              n_volume: int = 10000, n_surface: int = 10000, heat_ref: str | None = None) -> SdfModel:
    config.validate(mask.h)
    if not config.use_far_field and not heat.near_only:
        heat = HeatSolution(heat.u_near, heat.u_far, heat.tau, heat.tau_hat, heat.kappa, True)
    cells = RegionCells.from_mask(mask)
    trace: list = []
    phi0 = init_siren(arch, seed)
    res = train(phi0, make_sdf_objective(heat, cells, pc, config, n_volume, n_surface, trace),
                schedule, seed, stream=3)
    per_batch = schedule.batches_per_epoch
    last = trace[-per_batch:] if trace else []
    region_zero_at = next((i for i, t in enumerate(trace) if t["region"] == 0.0), None)
    full_region, _ = region_loss(res.field, cells, config.delta, with_grad=False)
    report = {
        "epoch_losses": res.epoch_losses,
        "learning_rates": res.learning_rates,
        "final_terms": {k: float(np.mean([t[k] for t in last])) for k in ("normal", "fit", "region")} if last else {},
        "region_loss_final": full_region,
        "region_loss_vanished": full_region == 0.0,
        "region_loss_first_zero_batch": region_zero_at,
    }
    return SdfModel(res.field, config, heat_ref, report)
