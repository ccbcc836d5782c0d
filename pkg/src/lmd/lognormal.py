"""Log-normal sampling, moments, density and KL divergence.

Noise is always generated as eps = exp(sigma * z) with z standard normal, so
every draw is strictly positive and m * eps is log-normal with median m.

Random streams are counter-based (Philox) and addressed by a (seed, stream_id)
pair: distinct pairs give independent streams, the same pair replays the same
sequence bit-for-bit. Standard normals come from numpy's Generator attached to
the Philox bit generator; the transform is fixed by the numpy version pinned in
the environment, which is enough for replayable experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LogNormalSpec:
    """Noise scale sigma and prior median for one parameter group."""

    sigma: float
    prior_median: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.prior_median <= 0:
            raise ValueError(f"prior_median must be positive, got {self.prior_median}")

    @property
    def mean_factor(self) -> float:
        """E[eps] for eps ~ LogN(0, sigma^2): exp(sigma^2 / 2)."""
        return math.exp(0.5 * self.sigma**2)

    @property
    def std_factor(self) -> float:
        """std[m * eps] / m: exp(sigma^2/2) * sqrt(exp(sigma^2) - 1)."""
        return self.mean_factor * math.sqrt(math.expm1(self.sigma**2))


@dataclass(frozen=True)
class RngStream:
    """Addressable, replayable random stream."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))


def sample_noise(spec: LogNormalSpec, n, rng: RngStream | np.random.Generator) -> np.ndarray:
    """Draw multiplicative noise eps = exp(sigma * z), elementwise positive.

    ``n`` may be an int or a shape tuple.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    z = gen.standard_normal(n)
    return np.exp(spec.sigma * z)


def density(spec: LogNormalSpec, median: float, theta) -> np.ndarray:
    """Log-normal pdf with mu = log(median) evaluated at theta > 0."""
    if spec.sigma <= 0:
        raise ValueError("density requires sigma > 0")
    if median <= 0:
        raise ValueError("median must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta <= 0):
        raise ValueError("log-normal density is only defined for theta > 0")
    mu = math.log(median)
    s = spec.sigma
    return np.exp(-((np.log(theta) - mu) ** 2) / (2 * s * s)) / (theta * s * math.sqrt(2 * math.pi))


def kl_equal_sigma(mu_q: float, mu_p: float, sigma: float):
    """KL(LogN(mu_q, sigma^2) || LogN(mu_p, sigma^2)) = (mu_q - mu_p)^2 / (2 sigma^2).

    Works elementwise when mu_q / mu_p are arrays.
    """
    if sigma <= 0:
        raise ValueError("kl_equal_sigma requires sigma > 0")
    d = np.asarray(mu_q, dtype=np.float64) - np.asarray(mu_p, dtype=np.float64)
    return d * d / (2 * sigma * sigma)
