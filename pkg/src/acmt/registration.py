"""Multi-resolution SSD registration and backward warping.

Fields are ``(2, H, W)`` arrays of pixel offsets ordered ``[dy, dx]``. Warping
is backward: ``out[p] = image[p + u[p]]`` with sample coordinates clamped to
the image border.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError, RegistrationError

logger = logging.getLogger(__name__)

__all__ = [
    "RegistrationConfig",
    "warp",
    "register",
    "registration_energy",
    "smoothness_energy",
]


@dataclass(frozen=True)
class RegistrationConfig:
    levels: int = 3
    iters_per_level: int = 100
    step_size: float = 0.5
    smooth_weight: float = 0.1

    def __post_init__(self):
        if self.levels < 1 or self.iters_per_level < 1:
            raise InvalidInputError("levels and iters_per_level must be positive")
        if not self.step_size > 0 or not self.smooth_weight > 0:
            raise InvalidInputError("step_size and smooth_weight must be positive")


def _check_field(shape, field):
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (2, *shape):
        raise InvalidInputError(
            f"field shape {field.shape} does not match image shape {tuple(shape)}"
        )
    return field


def warp(image, field, interpolation="bilinear"):
    """Backward-warp a 2D image or mask by a displacement field.

    ``nearest`` keeps the input dtype (binary masks stay binary); ``bilinear``
    returns floating point values.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise InvalidInputError(f"expected a 2D array, got shape {image.shape}")
    H, W = image.shape
    field = _check_field(image.shape, field)
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    y = np.clip(yy + field[0], 0, H - 1)
    x = np.clip(xx + field[1], 0, W - 1)

    if interpolation == "nearest":
        iy = np.clip(np.floor(y + 0.5).astype(np.intp), 0, H - 1)
        ix = np.clip(np.floor(x + 0.5).astype(np.intp), 0, W - 1)
        return image[iy, ix]
    if interpolation != "bilinear":
        raise InvalidInputError(f"unknown interpolation {interpolation!r}")

    out_dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64
    img = image.astype(np.float64, copy=False)
    y0 = np.clip(np.floor(y).astype(np.intp), 0, max(H - 2, 0))
    x0 = np.clip(np.floor(x).astype(np.intp), 0, max(W - 2, 0))
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = y - y0
    wx = x - x0
    out = (
        (1 - wy) * (1 - wx) * img[y0, x0]
        + (1 - wy) * wx * img[y0, x1]
        + wy * (1 - wx) * img[y1, x0]
        + wy * wx * img[y1, x1]
    )
    return out.astype(out_dtype, copy=False)


def _warp_torch(image, field):
    # differentiable twin of warp(..., "bilinear") for a (H, W) tensor
    H, W = image.shape
    yy = torch.arange(H, dtype=field.dtype).view(H, 1)
    xx = torch.arange(W, dtype=field.dtype).view(1, W)
    y = torch.clamp(yy + field[0], 0, H - 1)
    x = torch.clamp(xx + field[1], 0, W - 1)
    y0 = torch.clamp(torch.floor(y.detach()), 0, max(H - 2, 0))
    x0 = torch.clamp(torch.floor(x.detach()), 0, max(W - 2, 0))
    wy = y - y0
    wx = x - x0
    y0 = y0.long()
    x0 = x0.long()
    y1 = torch.clamp(y0 + 1, max=H - 1)
    x1 = torch.clamp(x0 + 1, max=W - 1)
    return (
        (1 - wy) * (1 - wx) * image[y0, x0]
        + (1 - wy) * wx * image[y0, x1]
        + wy * (1 - wx) * image[y1, x0]
        + wy * wx * image[y1, x1]
    )


def _smoothness_torch(field):
    dy = field[:, 1:, :] - field[:, :-1, :]
    dx = field[:, :, 1:] - field[:, :, :-1]
    return (dy ** 2).sum() + (dx ** 2).sum()


def smoothness_energy(field):
    """Sum of squared forward differences of both field channels."""
    field = torch.as_tensor(np.asarray(field, dtype=np.float64))
    return float(_smoothness_torch(field))


def _energy(fixed, moving, field, smooth_weight):
    residual = _warp_torch(moving, field) - fixed
    return (residual ** 2).sum() + smooth_weight * _smoothness_torch(field)


def registration_energy(fixed, moving, field, smooth_weight=0.1):
    """SSD(fixed, warp(moving, field)) + smooth_weight * ||grad field||^2."""
    fixed = torch.as_tensor(np.asarray(fixed, dtype=np.float64))
    moving = torch.as_tensor(np.asarray(moving, dtype=np.float64))
    field = torch.as_tensor(_check_field(fixed.shape, field))
    return float(_energy(fixed, moving, field, smooth_weight))


def _downsample(image):
    # 2x2 block averaging; odd trailing rows/columns are dropped
    H, W = image.shape
    H2, W2 = H // 2, W // 2
    return image[: 2 * H2, : 2 * W2].reshape(H2, 2, W2, 2).mean(axis=(1, 3))


def _upsample_field(field, shape):
    up = F.interpolate(
        torch.as_tensor(field)[None], size=shape, mode="bilinear", align_corners=False
    )[0]
    return up.numpy() * 2.0


def _descend(fixed, moving, field, config, level, history):
    fixed_t = torch.as_tensor(fixed)
    moving_t = torch.as_tensor(moving)
    u = torch.as_tensor(field).clone().requires_grad_(True)
    step = config.step_size
    energy = _energy(fixed_t, moving_t, u, config.smooth_weight)
    energies = [float(energy.detach())]

    for it in range(config.iters_per_level):
        (grad,) = torch.autograd.grad(energy, u)
        if not torch.isfinite(grad).all():
            raise RegistrationError(f"non-finite gradient at level {level}, iter {it}")
        with torch.no_grad():
            for _ in range(20):
                candidate = u - step * grad
                new_energy = _energy(fixed_t, moving_t, candidate, config.smooth_weight)
                if not torch.isfinite(new_energy):
                    raise RegistrationError(
                        f"non-finite energy at level {level}, iter {it}"
                    )
                if new_energy <= energy:
                    break
                step *= 0.5
            else:
                break  # no descent direction left at this resolution
        u = candidate.clone().requires_grad_(True)
        energy = _energy(fixed_t, moving_t, u, config.smooth_weight)
        energies.append(float(energy.detach()))
        step *= 1.2

    if history is not None:
        history.append(energies)
    logger.debug(
        "level %d: energy %.4g -> %.4g over %d iterations",
        level, energies[0], energies[-1], len(energies) - 1,
    )
    return u.detach().numpy()


def register(fixed, moving, config=None, history=None):
    """Align ``moving`` to ``fixed``; returns the backward field ``u``.

    ``warp(moving, u)`` approximates ``fixed``. Coarse-to-fine gradient
    descent on SSD plus a diffusion regulariser, with step backtracking so
    the energy never increases within a level. Pass a list as ``history`` to
    collect the per-level energy traces.
    """
    config = config or RegistrationConfig()
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if fixed.shape != moving.shape or fixed.ndim != 2:
        raise InvalidInputError(
            f"fixed {fixed.shape} and moving {moving.shape} must be equal 2D shapes"
        )
    if not (np.isfinite(fixed).all() and np.isfinite(moving).all()):
        raise RegistrationError("input images contain non-finite values")

    pyramid = [(fixed, moving)]
    for _ in range(config.levels - 1):
        f, m = pyramid[-1]
        if min(f.shape) < 16:
            break
        pyramid.append((_downsample(f), _downsample(m)))

    field = np.zeros((2, *pyramid[-1][0].shape))
    for level in range(len(pyramid) - 1, -1, -1):
        f, m = pyramid[level]
        if field.shape[1:] != f.shape:
            field = _upsample_field(field, f.shape)
        field = _descend(f, m, field, config, level, history)

    logger.info(
        "registered %s: mean |u| = %.3f px, smoothness %.4g",
        fixed.shape,
        float(np.hypot(field[0], field[1]).mean()),
        smoothness_energy(field),
    )
    return field
