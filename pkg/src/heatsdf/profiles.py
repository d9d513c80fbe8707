"""C^1 cubic Hermite step profiles used for smoothed indicators and blending."""

import numpy as np


def eta(s):
    """1 for s < -1, (s+2)(s-1)^2/4 on [-1, 1], 0 for s > 1."""
    s = np.asarray(s, dtype=np.float64)
    t = np.clip(s, -1.0, 1.0)
    return 0.25 * (t + 2.0) * (t - 1.0) ** 2


def eta_prime(s):
    s = np.asarray(s, dtype=np.float64)
    return np.where(np.abs(s) <= 1.0, 0.75 * (s * s - 1.0), 0.0)


def eta_delta(s, delta: float):
    if delta <= 0:
        raise ValueError("delta must be positive")
    return eta(np.asarray(s, dtype=np.float64) / delta)


def eta_delta_prime(s, delta: float):
    return eta_prime(np.asarray(s, dtype=np.float64) / delta) / delta


def mu(s):
    """1 for s < 0, (2s+1)(2s-2)^2/4 on [0, 1], 0 for s > 1."""
    t = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
    return 0.25 * (2.0 * t + 1.0) * (2.0 * t - 2.0) ** 2


def mu_prime(s):
    s = np.asarray(s, dtype=np.float64)
    return np.where((s >= 0.0) & (s <= 1.0), 6.0 * s * (s - 1.0), 0.0)


def mu_sigma(s, sigma: float):
    """Narrow-band plateau: 1 on [-sigma/2, sigma/2], 0 outside (-sigma, sigma),
    mu-shaped ramps in between."""
    r = np.abs(np.asarray(s, dtype=np.float64))
    return mu((r - 0.5 * sigma) / (0.5 * sigma))


def mu_sigma_prime(s, sigma: float):
    s = np.asarray(s, dtype=np.float64)
    r = np.abs(s)
    return np.sign(s) * mu_prime((r - 0.5 * sigma) / (0.5 * sigma)) / (0.5 * sigma)
