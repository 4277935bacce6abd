"""Hierarchical feature-disentanglement losses.

* texture: L2 between 7x7 projections of the shallow features of the
  translated MR and US images;
* boundary: L1 between Sobel responses of 3x3 projections of the deep
  features of a translated image and of its (gradient-stopped) source;
* SB: transport cost between the bridge state and the prediction minus an
  entropy bonus scaled by ``2 sigma (1 - t)``;
* total: weighted sum of the three.

The 7x7 / 3x3 projection heads are fixed, seeded and bias-free. All
convolutions use replicate padding; losses are means over elements.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from .errors import DegenerateBatchError, InvalidInputError, NonFiniteLossError

__all__ = [
    "LossWeights", "LossHeads", "LossReport", "SOBEL_X", "SOBEL_Y",
    "conv_replicate", "sobel_apply", "texture_loss", "boundary_loss",
    "entropy_estimate", "random_projection", "sb_loss", "total_loss",
]

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.contiguous()


@dataclass(frozen=True)
class LossWeights:
    texture: float = 1.0
    boundary: float = 0.5
    sb: float = 1.0

    def __post_init__(self):
        values = (self.texture, self.boundary, self.sb)
        if any(not (v >= 0 and math.isfinite(v)) for v in values):
            raise InvalidInputError(f"loss weights must be finite and >= 0, got {values}")
        if not any(values):
            raise InvalidInputError("at least one loss weight must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    texture: float
    boundary_mr: float
    boundary_us: float
    sb_mr: float
    sb_us: float
    total: float

    @property
    def boundary(self):
        return 0.5 * (self.boundary_mr + self.boundary_us)

    @property
    def sb(self):
        return 0.5 * (self.sb_mr + self.sb_us)

    def recompose(self, weights):
        return weights.texture * self.texture + weights.boundary * self.boundary + weights.sb * self.sb

    def to_dict(self):
        d = asdict(self)
        d.update(boundary=self.boundary, sb=self.sb)
        return d


class LossHeads:
    """Frozen linear projection heads, drawn from ``seed``."""

    def __init__(self, shallow_channels, deep_channels, out_channels=8, seed=0,
                 dtype=torch.float32):
        g = torch.Generator().manual_seed(int(seed))
        self.seed = int(seed)
        self.conv7 = torch.randn(out_channels, shallow_channels, 7, 7, generator=g)
        self.conv7 /= math.sqrt(shallow_channels * 49)
        self.conv3 = torch.randn(out_channels, deep_channels, 3, 3, generator=g)
        self.conv3 /= math.sqrt(deep_channels * 9)
        self.conv7 = self.conv7.to(dtype)
        self.conv3 = self.conv3.to(dtype)

    @classmethod
    def for_network(cls, net_config, out_channels=8, seed=0):
        return cls(net_config.channels(net_config.shallow_tap_level),
                   net_config.channels(net_config.deep_tap_level), out_channels, seed)

    def to(self, dtype):
        heads = object.__new__(LossHeads)
        heads.seed = self.seed
        heads.conv7 = self.conv7.to(dtype)
        heads.conv3 = self.conv3.to(dtype)
        return heads

    def texture_proj(self, x):
        return conv_replicate(x, self.conv7.to(x.dtype))

    def boundary_proj(self, x):
        return conv_replicate(x, self.conv3.to(x.dtype))


def _as_batch(x):
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise InvalidInputError(f"expected (C, H, W) or (B, C, H, W), got {tuple(x.shape)}")
    return x


def conv_replicate(x, weight):
    """Bias-free cross-correlation with replicate ("same") padding."""
    x = _as_batch(x)
    k = weight.shape[-1]
    p = k // 2
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise InvalidInputError(f"feature map {tuple(x.shape[-2:])} too small")
    return F.conv2d(F.pad(x, (p, p, p, p), mode="replicate"), weight)


def sobel_apply(feature_map):
    """Per-channel Sobel responses ``[kx-responses, ky-responses]`` (2C channels)."""
    x = _as_batch(feature_map)
    if x.shape[-1] < 3 or x.shape[-2] < 3:
        raise InvalidInputError(f"Sobel needs at least 3x3 inputs, got {tuple(x.shape[-2:])}")
    C = x.shape[1]
    kernels = torch.stack([SOBEL_X, SOBEL_Y]).to(x.dtype)  # (2, 3, 3)
    weight = kernels[:, None].repeat(C, 1, 1, 1)  # (2C, 1, 3, 3): [c0x, c0y, c1x, ...]
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    out = F.conv2d(padded, weight, groups=C)
    B, _, H, W = out.shape
    # regroup to [all x responses, all y responses]
    return out.view(B, C, 2, H, W).transpose(1, 2).reshape(B, 2 * C, H, W)


def texture_loss(fs_mr, fs_us, heads):
    if fs_mr.shape != fs_us.shape:
        raise InvalidInputError(f"shallow feature shapes differ: {tuple(fs_mr.shape)} vs {tuple(fs_us.shape)}")
    return ((heads.texture_proj(fs_mr) - heads.texture_proj(fs_us)) ** 2).mean()


def boundary_loss(fd_1, fd_0, heads):
    """L1 between Sobel(conv3(.)) of translated and source deep features.

    The source branch ``fd_0`` is detached; no gradient ever reaches it.
    """
    if fd_1.shape != fd_0.shape:
        raise InvalidInputError(f"deep feature shapes differ: {tuple(fd_1.shape)} vs {tuple(fd_0.shape)}")
    edges_1 = sobel_apply(heads.boundary_proj(fd_1))
    edges_0 = sobel_apply(heads.boundary_proj(fd_0.detach()))
    return (edges_1 - edges_0).abs().mean()


def _median_bandwidth(sq_dists):
    n = sq_dists.shape[0]
    iu = torch.triu_indices(n, n, offset=1)
    med_sq = torch.median(sq_dists[iu[0], iu[1]])
    if not med_sq > 0:
        raise DegenerateBatchError("median pairwise distance is zero (identical samples)")
    # median / sqrt(2 log(N + 1)): keeps the kernel narrow as N grows
    return torch.sqrt(med_sq / (2.0 * math.log(n + 1)))


def entropy_estimate(samples, bandwidth="median-heuristic"):
    """Leave-one-out Gaussian kernel-density entropy estimate (nats).

    ``-(1/N) sum_i log[(1/(N-1)) sum_{j != i} k_h(s_i - s_j)]``. With the
    median heuristic the bandwidth stays differentiable in the samples.
    """
    if samples.ndim != 2:
        raise InvalidInputError(f"expected (N, d) samples, got {tuple(samples.shape)}")
    N, d = samples.shape
    if N < 4:
        raise DegenerateBatchError(f"entropy estimate needs N >= 4 samples, got {N}")
    diff = samples[:, None, :] - samples[None, :, :]
    sq = (diff ** 2).sum(-1)
    if bandwidth == "median-heuristic":
        h = _median_bandwidth(sq)
    else:
        h = torch.as_tensor(float(bandwidth), dtype=samples.dtype)
        if not h > 0:
            raise InvalidInputError("bandwidth must be positive")
    logits = -sq / (2.0 * h ** 2)
    eye = torch.eye(N, dtype=torch.bool)
    logits = logits.masked_fill(eye, float("-inf"))
    log_density = (torch.logsumexp(logits, dim=1) - math.log(N - 1)
                   - 0.5 * d * torch.log(2.0 * math.pi * h ** 2))
    return -log_density.mean()


def random_projection(in_dim, out_dim=64, seed=0, dtype=torch.float32):
    """Fixed Gaussian projection matrix ``(in_dim, out_dim)``, columns ~ N(0, 1/in_dim)."""
    g = torch.Generator().manual_seed(int(seed))
    return (torch.randn(in_dim, out_dim, generator=g) / math.sqrt(in_dim)).to(dtype)


def sb_loss(x_ti, x1_pred, t_i, sigma, projection=None, bandwidth="median-heuristic"):
    """Transport cost minus ``2 sigma (1 - t_i)`` times the pair entropy.

    The squared distance is averaged per element, and the entropy term is
    divided by the per-image element count so both terms share that scale.
    Pairs ``(x_ti, x1_pred)`` are flattened, concatenated and projected by
    ``projection`` before the entropy estimate.
    """
    if x_ti.shape != x1_pred.shape:
        raise InvalidInputError(f"shape mismatch {tuple(x_ti.shape)} vs {tuple(x1_pred.shape)}")
    x_ti = x_ti.detach()
    mse = ((x_ti - x1_pred) ** 2).mean()
    coef = 2.0 * sigma * (1.0 - t_i)
    if sigma == 0 or coef == 0:
        return mse
    B = x_ti.shape[0]
    if B < 4:
        raise DegenerateBatchError(f"SB entropy term needs a batch of >= 4, got {B}")
    pairs = torch.cat([x_ti.reshape(B, -1), x1_pred.reshape(B, -1)], dim=1)
    if projection is not None:
        pairs = pairs @ projection.to(pairs.dtype)
    per_image = x_ti[0].numel()
    return mse - coef * entropy_estimate(pairs, bandwidth) / per_image


def total_loss(texture, boundary_mr, boundary_us, sb_mr, sb_us, weights):
    """Weighted total with the MR/US halves averaged for boundary and SB."""
    components = dict(texture=texture, boundary_mr=boundary_mr, boundary_us=boundary_us,
                      sb_mr=sb_mr, sb_us=sb_us)
    values = {k: float(v.detach()) if torch.is_tensor(v) else float(v)
              for k, v in components.items()}
    for name, value in values.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite {name} loss: {value}", values)
    return (weights.texture * texture
            + weights.boundary * 0.5 * (boundary_mr + boundary_us)
            + weights.sb * 0.5 * (sb_mr + sb_us))
