"""Run configuration: one flat dataclass, two profiles, JSON round trip."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .neuralfield import Architecture
from .pointcloud import DOMAIN_HALF_WIDTH
from .sdfstage import ConfigInvalid, SdfConfig
from .training import TrainSchedule


@dataclass(frozen=True)
class RunConfig:
    profile: str = "full"
    seed: int = 0
    # network
    hidden_dim: int = 256
    hidden_layers: int = 4
    omega0: float = 30.0
    omega_hidden: float = 30.0
    # optimisation (shared by every stage unless overridden)
    epochs: int = 50
    batches_per_epoch: int = 1000
    lr: float = 1e-4
    sdf_lr: float | None = None
    min_lr: float = 1e-8
    patience: int = 2
    factor: float = 0.1
    threshold: float = 1e-4
    n_volume: int = 10000
    n_surface: int = 10000
    # heat stage
    tau: float = 0.005
    tau_hat: float = 0.1
    k_neighbors: int = 12
    # sdf stage
    lambda_fit: float = 100.0
    lambda_B: float = 1.0
    delta: float = 0.005
    use_far_field: bool = True
    region_samples: int | None = None
    # orientation grid
    dims: int = 64
    grid_h: float | None = None
    mask: str = "auto"
    # surface flow
    tau_pde: float = 0.01
    sigma: float = 0.05
    flow_steps: int = 5
    flow_epochs: int = 5
    flow_batches: int = 200
    flow_lr: float = 3e-4
    flow_batch_size: int = 2000

    def __post_init__(self):
        self.validate()

    @property
    def h(self) -> float:
        return self.grid_h if self.grid_h is not None else 2 * DOMAIN_HALF_WIDTH / self.dims

    def validate(self) -> "RunConfig":
        if self.mask not in ("auto", "fixed"):
            raise ConfigInvalid(f"mask must be 'auto' or 'fixed', got {self.mask!r}")
        if not 0 < self.tau < self.tau_hat:
            raise ConfigInvalid("0 < tau < tau_hat violated")
        if self.dims < 2 or self.h <= 0:
            raise ConfigInvalid("grid needs dims >= 2 and h > 0")
        if self.sigma <= 0 or self.tau_pde <= 0:
            raise ConfigInvalid("sigma > 0 and tau_pde > 0 required")
        if self.n_volume < 1 or self.n_surface < 1:
            raise ConfigInvalid("sample counts must be positive")
        try:
            self.architecture()
            self.schedule()
            self.flow_schedule()
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from None
        self.sdf_config().validate(self.h)
        return self

    def architecture(self) -> Architecture:
        return Architecture(3, self.hidden_dim, self.hidden_layers, self.omega0, self.omega_hidden)

    def schedule(self, lr: float | None = None) -> TrainSchedule:
        return TrainSchedule(self.epochs, self.batches_per_epoch, lr or self.lr, self.min_lr,
                             self.patience, self.factor, self.threshold)

    def sdf_schedule(self) -> TrainSchedule:
        return self.schedule(self.sdf_lr)

    def flow_schedule(self) -> TrainSchedule:
        return TrainSchedule(self.flow_epochs, self.flow_batches, self.flow_lr, self.min_lr,
                             self.patience, self.factor, self.threshold)

    def sdf_config(self) -> SdfConfig:
        return SdfConfig(self.lambda_fit, self.lambda_B, self.delta, self.use_far_field,
                         self.region_samples)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)


QUICK = dict(profile="quick", hidden_dim=64, hidden_layers=2, epochs=5, batches_per_epoch=200,
             n_volume=2000, n_surface=2000, sdf_lr=3e-4, region_samples=2000)


def profile_config(name: str = "full") -> RunConfig:
    if name == "full":
        return RunConfig()
    if name == "quick":
        return RunConfig(**QUICK)
    raise ConfigInvalid(f"unknown profile {name!r}")


def load_config(path=None, profile: str | None = None, **overrides) -> RunConfig:
    """Profile defaults, then the JSON file, then explicit overrides."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        data = json.loads(p.read_text())
        if not isinstance(data, dict):
            raise ConfigInvalid(f"{p}: expected a JSON object")
    name = profile or data.pop("profile", None) or "full"
    data.pop("profile", None)
    base = profile_config(name)
    return base.with_overrides(**data).with_overrides(**overrides)
