"""Stage wiring shared by the CLI and the experiment scripts: checkpoints
with provenance metadata and run manifests."""

from __future__ import annotations

import hashlib
import json
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .heatstage import HeatSolution, solve_heat
from .neuralfield import NeuralField
from .orientation import RegionMask, build_region_mask, build_region_mask_auto, domain_grid
from .pointcloud import NormalizationTransform, PointCloud, load_point_cloud, prepare_cloud
from .sdfstage import SdfModel, solve_sdf
from .training import load_checkpoint, save_checkpoint, schedule_dict

__version__ = "0.1.0"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    out = {"heatsdf": __version__, "python": sys.version.split()[0],
           "platform": platform.platform(), "numpy": np.__version__}
    for mod in ("scipy", "torch", "skimage"):
        try:
            out[mod] = __import__(mod).__version__
        except ImportError:
            out[mod] = None
    return out


def write_manifest(output, config: RunConfig | None, inputs: dict | None = None,
                   extra: dict | None = None) -> Path:
    """``<output>.manifest.json``: resolved config, input/output hashes, versions."""
    output = Path(output)
    doc = {
        "output": output.name,
        "output_sha256": sha256_file(output) if output.is_file() else None,
        "config": config.to_dict() if config is not None else None,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in (inputs or {}).items()},
        "versions": versions(),
    }
    if extra:
        doc.update(extra)
    path = output.with_name(output.name + ".manifest.json")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")
    return path


def prepare(cloud, config: RunConfig) -> PointCloud:
    pc = load_point_cloud(cloud) if not isinstance(cloud, PointCloud) else cloud
    return prepare_cloud(pc, k=config.k_neighbors)


def grid_centers(config: RunConfig) -> np.ndarray:
    origin, h, dims = domain_grid(config.dims)
    idx = np.stack(np.meshgrid(*(np.arange(d) for d in dims), indexing="ij"), -1).reshape(-1, 3)
    return origin + (idx + 0.5) * h


def run_heat(pc: PointCloud, config: RunConfig):
    heat, runs = solve_heat(pc, grid_centers(config), config.schedule(), config.seed,
                            config.architecture(), config.tau, config.tau_hat,
                            config.n_volume, config.n_surface,
                            near_only=not config.use_far_field)
    info = {"near_losses": runs["near"].epoch_losses, "far_losses": runs["far"].epoch_losses,
            "near_lrs": runs["near"].learning_rates, "far_lrs": runs["far"].learning_rates}
    return heat, info


def save_heat(path, heat: HeatSolution, pc: PointCloud, config: RunConfig, info: dict | None = None):
    meta = {"kind": "heat", "kappa": heat.kappa, "tau": heat.tau, "tau_hat": heat.tau_hat,
            "near_only": heat.near_only, "transform": pc.transform.to_dict(),
            "epsilon": pc.epsilon, "seed": config.seed, "schedule": schedule_dict(config.schedule()),
            "config": config.to_dict(), "train": info or {}}
    return save_checkpoint(path, {"u_near": heat.u_near, "u_far": heat.u_far}, meta)


def load_heat(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"heat checkpoint not found: {path}")
    fields, meta = load_checkpoint(path)
    heat = HeatSolution(fields["u_near"], fields["u_far"], meta["tau"], meta["tau_hat"],
                        meta["kappa"], meta.get("near_only", False))
    return heat, meta


def build_mask(pc: PointCloud, config: RunConfig) -> RegionMask:
    if config.mask == "auto" and config.grid_h is None:
        mask, _ = build_region_mask_auto(pc.points, dims=config.dims)
        return mask
    return build_region_mask(pc.points, h=config.h, dims=config.dims,
                             origin=None if config.grid_h is None else np.full(3, -0.5 * config.dims * config.h))


def run_sdf(heat: HeatSolution, pc: PointCloud, config: RunConfig, heat_ref: str | None = None,
            mask: RegionMask | None = None) -> tuple[SdfModel, RegionMask]:
    mask = build_mask(pc, config) if mask is None else mask
    model = solve_sdf(heat, mask, pc, config.sdf_config(), config.sdf_schedule(), config.seed + 2,
                      config.architecture(), config.n_volume, config.n_surface, heat_ref)
    model.report["mask_h"] = mask.h
    model.report["mask_counts"] = mask.counts()
    return model, mask


def save_sdf(path, model: SdfModel, pc: PointCloud, config: RunConfig):
    meta = {"kind": "sdf", "transform": pc.transform.to_dict(), "seed": config.seed,
            "heat_ref": model.heat_ref, "schedule": schedule_dict(config.sdf_schedule()),
            "config": config.to_dict(), "report": model.report}
    return save_checkpoint(path, {"phi": model.phi}, meta)


def load_sdf(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sdf checkpoint not found: {path}")
    fields, meta = load_checkpoint(path)
    if "phi" not in fields:
        raise ValueError(f"{path}: not an sdf checkpoint")
    return fields["phi"], meta


@dataclass(frozen=True)
class InputFrameField:
    """A field trained in normalised coordinates, viewed in the input frame:
    ``phi_in(x) = phi(T x) / s`` (distances scale back by ``1/s``)."""

    phi: NeuralField
    transform: NormalizationTransform

    def eval(self, X):
        return self.phi.eval(self.transform.apply(X)) / self.transform.scale

    __call__ = eval

    def value_and_grad(self, X):
        v, g = self.phi.value_and_grad(self.transform.apply(X))
        return v / self.transform.scale, g  # chain rule: s * g / s
