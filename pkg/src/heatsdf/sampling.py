"""Monte-Carlo sampling for the volume integrals, the weighted surface term and
narrow-band evaluation sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import DOMAIN_HALF_WIDTH, DOMAIN_VOLUME, PointCloud


class RejectionStall(RuntimeError):
    pass


@dataclass(frozen=True)
class VolumeBatch:
    points: np.ndarray
    domain_volume: float = DOMAIN_VOLUME

    def estimate(self, values) -> float:
        """Monte-Carlo estimate of the integral over the domain."""
        return self.domain_volume * float(np.mean(values))

    @property
    def quadrature_weights(self) -> np.ndarray:
        return np.full(len(self.points), self.domain_volume / len(self.points))


@dataclass(frozen=True)
class SurfaceBatch:
    points: np.ndarray
    weights: np.ndarray

    def estimate(self, values) -> float:
        return float(np.dot(self.weights, values))


def _uniform_open(rng, n):
    # Generator.uniform draws from [low, high); reject the closed end explicitly
    x = rng.uniform(-DOMAIN_HALF_WIDTH, DOMAIN_HALF_WIDTH, size=(n, 3))
    bad = np.any(x <= -DOMAIN_HALF_WIDTH, axis=1)
    while bad.any():
        x[bad] = rng.uniform(-DOMAIN_HALF_WIDTH, DOMAIN_HALF_WIDTH, size=(int(bad.sum()), 3))
        bad = np.any(x <= -DOMAIN_HALF_WIDTH, axis=1)
    return x


def sample_volume(rng: np.random.Generator, n: int) -> VolumeBatch:
    if n < 1:
        raise ValueError("n must be positive")
    return VolumeBatch(_uniform_open(rng, n))


def sample_surface(pc: PointCloud, rng: np.random.Generator, m: int) -> SurfaceBatch:
    """Surface quadrature batch of size ``m``.

    ``m == N`` returns the full weighted sum. Otherwise ``m`` indices are drawn
    i.i.d. with probability proportional to the quadrature weights and given
    weight ``1/m``, an unbiased estimator of the full weighted sum.
    """
    N = len(pc)
    if not 1 <= m <= N:
        raise ValueError(f"need 1 <= m <= {N}, got {m}")
    if m == N:
        return SurfaceBatch(pc.points, pc.weights.copy())
    cdf = np.cumsum(pc.weights)
    idx = np.searchsorted(cdf, rng.uniform(0.0, cdf[-1], size=m), side="right")
    idx = np.minimum(idx, N - 1)
    return SurfaceBatch(pc.points[idx], np.full(m, 1.0 / m))


def sample_narrow_band(distance_oracle, band: float = 0.1, n: int = 10000,
                       rng: np.random.Generator | None = None,
                       max_trials: int = 10**7, min_rate: float = 1e-5,
                       chunk: int = 100000) -> np.ndarray:
    """Rejection-sample ``n`` points uniformly from ``{|d| <= band}``."""
    if rng is None:
        rng = np.random.default_rng(0)
    accepted = []
    got = 0
    trials = 0
    while got < n:
        x = _uniform_open(rng, chunk)
        trials += chunk
        d = np.asarray(distance_oracle(x))
        keep = x[np.abs(d) <= band]
        accepted.append(keep)
        got += len(keep)
        if trials >= max_trials and got / trials < min_rate:
            raise RejectionStall(
                f"acceptance rate {got / trials:.2e} after {trials} trials")
        if trials >= 100 * max_trials:
            raise RejectionStall("too many trials")
    return np.concatenate(accepted)[:n]
