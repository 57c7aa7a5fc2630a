"""Diagonal Gaussians, Bernoulli observations and the closed-form pieces built on them.

Every function reduces over the last axis, so a batch of shape ``(B, d)``
yields a length-``B`` tensor and a single vector yields a scalar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)
CLAMP_EPS = 1e-6


@dataclass
class DiagGaussian:
    """Gaussian with diagonal covariance, stored as mean and log-variance."""

    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        self.mean = T.as_tensor(self.mean)
        self.logvar = T.as_tensor(self.logvar)
        if self.mean.shape != self.logvar.shape:
            raise DimensionError(
                f"mean shape {self.mean.shape} != logvar shape {self.logvar.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.logvar.data)


@dataclass
class BernoulliParam:
    """Bernoulli means, clamped to ``[CLAMP_EPS, 1 - CLAMP_EPS]`` on construction."""

    mean: Tensor

    def __post_init__(self):
        self.mean = T.clip(T.as_tensor(self.mean), CLAMP_EPS, 1.0 - CLAMP_EPS)


def gaussian_log_pdf(z, g: DiagGaussian) -> Tensor:
    z = T.as_tensor(z)
    if z.shape != g.mean.shape:
        raise DimensionError(f"point shape {z.shape} != gaussian shape {g.mean.shape}")
    sq = T.square(z - g.mean) * T.exp(-g.logvar)
    per_dim = -0.5 * LOG_2PI - 0.5 * g.logvar - 0.5 * sq
    return T.tsum(per_dim, axis=-1)


def kl_to_std_normal(g: DiagGaussian) -> Tensor:
    """KL(g || N(0, I)) in closed form."""
    per_dim = T.expm1(g.logvar) - g.logvar + T.square(g.mean)
    return T.scale(T.tsum(per_dim, axis=-1), 0.5)


def sample_reparameterized(g: DiagGaussian, noise) -> Tensor:
    """Return ``mean + exp(logvar / 2) * noise``; ``noise`` is treated as a constant."""
    noise = T.Tensor(noise) if not isinstance(noise, Tensor) else Tensor(noise.data)
    if noise.shape != g.mean.shape:
        raise DimensionError(f"noise shape {noise.shape} != gaussian shape {g.mean.shape}")
    return g.mean + T.exp(T.scale(g.logvar, 0.5)) * noise


def bernoulli_log_lik(x, p: BernoulliParam) -> Tensor:
    """Sum of ``x log p + (1 - x) log(1 - p)``.

    Accepts relaxed ``x`` in [0, 1]; the continuous-Bernoulli normaliser is
    intentionally left out.
    """
    x = T.as_tensor(x)
    if np.any(x.data < 0.0) or np.any(x.data > 1.0):
        raise DomainError("Bernoulli observations must lie in [0, 1]")
    if x.shape != p.mean.shape:
        raise DimensionError(f"observation shape {x.shape} != parameter shape {p.mean.shape}")
    ll = x * T.log(p.mean) + (1.0 - x) * T.log(1.0 - p.mean)
    return T.tsum(ll, axis=-1)


def flat_sigma_for_delta(delta: float, d: int, *, max_delta: float = 1.0 / math.e) -> float:
    """Per-dimension standard deviation whose d-dimensional density never exceeds ``delta``.

    The peak density of N(mu, u^2 I) is ``(u sqrt(2 pi))^(-d)``; solving for
    equality with ``delta`` gives ``u = (delta^-1 (2 pi)^(-d/2))^(1/d)``.

    The default upper bound on ``delta`` is the range used when an extra flat
    subcluster is appended; pass ``max_delta=math.inf`` for the unrestricted
    construction.
    """
    if d < 1:
        raise DomainError(f"dimension must be positive, got {d}")
    if not (0.0 < delta < max_delta):
        raise DomainError(f"delta must lie in (0, {max_delta}), got {delta}")
    return ((1.0 / delta) * (2.0 * math.pi) ** (-d / 2.0)) ** (1.0 / d)
