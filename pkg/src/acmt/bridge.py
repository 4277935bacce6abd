"""Schrödinger-bridge primitives on the conditional-flow-matching path.

Given bridge states at two times, the intermediate state is Gaussian around
the linear interpolant with variance ``w (1 - w) sigma (t_n - t_m)``. The
discrete sampler moves a state towards a predicted terminal image with the
same rule, using the terminal time 1 as the right end point.

All functions take an explicit ``torch.Generator`` so runs are reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import InvalidInputError

__all__ = ["BridgeConfig", "cfm_interpolate", "diffusion_step", "pool_sample", "interp_weight"]


@dataclass(frozen=True)
class BridgeConfig:
    """Noise scale and the predefined timestep pool ``{t_0 = 0 < ... < t_T < 1}``."""

    sigma: float = 0.01
    timestep_pool: tuple = (0.0, 0.2, 0.4, 0.6, 0.8)

    def __post_init__(self):
        pool = tuple(float(t) for t in self.timestep_pool)
        object.__setattr__(self, "timestep_pool", pool)
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise InvalidInputError(f"sigma must be finite and >= 0, got {self.sigma}")
        if not pool or pool[0] != 0.0:
            raise InvalidInputError("timestep pool must start at t_0 = 0")
        if any(b <= a for a, b in zip(pool, pool[1:])):
            raise InvalidInputError("timestep pool must be strictly increasing")
        if pool[-1] >= 1.0:
            raise InvalidInputError("timestep pool entries must be < 1")

    @classmethod
    def uniform(cls, steps=5, sigma=0.01):
        return cls(sigma=sigma, timestep_pool=tuple(i / steps for i in range(steps)))


def interp_weight(t_j, t_next):
    """Weight of the terminal prediction when stepping from ``t_j`` to ``t_next``."""
    return (t_next - t_j) / (1.0 - t_j)


def _noise_like(x, std, generator):
    return torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device) * std


def cfm_interpolate(x_tm, x_tn, t_m, t_n, t, sigma, generator=None):
    """Draw ``x_t`` given bridge states at ``t_m`` and ``t_n``."""
    if x_tm.shape != x_tn.shape:
        raise InvalidInputError(f"shape mismatch {tuple(x_tm.shape)} vs {tuple(x_tn.shape)}")
    if not t_m < t_n:
        raise InvalidInputError(f"need t_m < t_n, got {t_m}, {t_n}")
    if not t_m <= t <= t_n:
        raise InvalidInputError(f"t={t} outside [{t_m}, {t_n}]")
    if sigma < 0:
        raise InvalidInputError("sigma must be >= 0")
    w = (t - t_m) / (t_n - t_m)
    if w == 0.0:
        return x_tm.clone()
    if w == 1.0:
        return x_tn.clone()
    mean = w * x_tn + (1.0 - w) * x_tm
    var = w * (1.0 - w) * sigma * (t_n - t_m)
    if var == 0.0:
        return mean
    return mean + _noise_like(mean, math.sqrt(var), generator)


def diffusion_step(x_tj, x1_pred, t_j, t_next, sigma, generator=None):
    """One discrete bridge step from ``t_j`` to ``t_next`` towards ``x1_pred``.

    ``x_next = w x1_pred + (1 - w) x_tj + N(0, alpha)`` with
    ``w = (t_next - t_j) / (1 - t_j)`` and ``alpha = w (1 - w) (1 - t_j) sigma``.
    At ``t_next = 1`` the step returns ``x1_pred`` exactly and draws no noise.
    """
    if not 0.0 <= t_j < t_next <= 1.0:
        raise InvalidInputError(f"need 0 <= t_j < t_next <= 1, got {t_j}, {t_next}")
    if x_tj.shape != x1_pred.shape:
        raise InvalidInputError(f"shape mismatch {tuple(x_tj.shape)} vs {tuple(x1_pred.shape)}")
    w = interp_weight(t_j, t_next)
    if w == 1.0:
        return x1_pred.clone()
    alpha = w * (1.0 - w) * (1.0 - t_j) * sigma
    x_next = w * x1_pred + (1.0 - w) * x_tj
    if alpha > 0.0:
        x_next = x_next + _noise_like(x_next, math.sqrt(alpha), generator)
    return x_next


def pool_sample(pool, generator=None):
    """Uniformly pick ``(i, t_i)`` from the timestep pool."""
    pool = tuple(pool)
    if not pool:
        raise InvalidInputError("timestep pool is empty")
    i = int(torch.randint(len(pool), (1,), generator=generator))
    return i, pool[i]
