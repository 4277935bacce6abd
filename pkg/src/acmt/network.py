"""Time-conditioned encoder-decoder that predicts the terminal bridge state.

The encoder exposes two feature taps: a shallow one right after the first
(stride-2) encoder block and a deep one at the bottleneck. Time enters every
block as a per-channel scale and shift computed from a sinusoidal embedding.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .errors import InvalidInputError

__all__ = ["NetworkConfig", "FeatureMaps", "TranslatorNet", "parameter_fingerprint"]


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 4
    base_channels: int = 16
    time_embed_dim: int = 64
    shallow_tap_level: int = 1
    deep_tap_level: int | None = None  # None -> bottleneck (== levels)
    image_size: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if self.deep_tap_level is None:
            object.__setattr__(self, "deep_tap_level", self.levels)
        if self.levels < 2 or self.base_channels < 1 or self.time_embed_dim < 2:
            raise InvalidInputError("levels >= 2, base_channels >= 1, time_embed_dim >= 2")
        if self.time_embed_dim % 2:
            raise InvalidInputError("time_embed_dim must be even")
        if not 1 <= self.shallow_tap_level < self.deep_tap_level <= self.levels:
            raise InvalidInputError("need 1 <= shallow_tap_level < deep_tap_level <= levels")
        if self.resolution(self.shallow_tap_level) <= self.resolution(self.deep_tap_level):
            raise InvalidInputError("shallow tap must have a higher resolution than the deep tap")
        factor = 2 ** (self.levels - 1)
        if any(s % factor for s in self.image_size):
            raise InvalidInputError(f"image size {self.image_size} not divisible by {factor}")

    def channels(self, level):
        return self.base_channels * 2 ** (level - 1) if level > 0 else self.base_channels

    def resolution(self, level):
        # encoder blocks 1..levels-1 halve the resolution; the bottleneck keeps it
        return self.image_size[0] // 2 ** min(level, self.levels - 1)

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


class FeatureMaps(NamedTuple):
    shallow: torch.Tensor
    deep: torch.Tensor


def sinusoidal_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _groups(channels):
    return math.gcd(channels, 8)


class Block(nn.Module):
    def __init__(self, cin, cout, temb, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.film = nn.Linear(temb, 2 * cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        if cin != cout or stride != 1:
            self.skip = nn.Conv2d(cin, cout, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x, emb):
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm1(self.conv1(x))
        h = F.silu(h * (1 + scale) + shift)
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class TranslatorNet(nn.Module):
    """Maps a bridge state ``x_t`` (B, 1, H, W) at time ``t`` to a terminal prediction."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or NetworkConfig()
        E = config.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(E, E), nn.SiLU(), nn.Linear(E, E))
        self.stem = nn.Conv2d(1, config.base_channels, 3, padding=1)
        L = config.levels
        self.down = nn.ModuleList(
            Block(config.channels(l - 1), config.channels(l), E, stride=2 if l < L else 1)
            for l in range(1, L + 1)
        )
        self.up = nn.ModuleList(
            Block(config.channels(l + 1) + config.channels(l), config.channels(l), E)
            for l in range(L - 1, 0, -1)
        )
        self.head_block = Block(config.channels(1) + config.base_channels, config.base_channels, E)
        self.out = nn.Conv2d(config.base_channels, 1, 1)

    def _time(self, t, batch, dtype):
        t = torch.as_tensor(t, dtype=dtype)
        if t.ndim == 0:
            t = t.expand(batch)
        if t.shape != (batch,):
            raise InvalidInputError(f"t must be a scalar or shape ({batch},), got {tuple(t.shape)}")
        if (t < 0).any() or (t > 1).any():
            raise InvalidInputError("t must lie in [0, 1]")
        return self.time_mlp(sinusoidal_embedding(t, self.config.time_embed_dim))

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.config.image_size:
            raise InvalidInputError(
                f"expected (B, 1, {self.config.image_size[0]}, {self.config.image_size[1]}),"
                f" got {tuple(x.shape)}"
            )

    def _encode(self, x, emb):
        h = self.stem(x)
        skips = [h]
        for block in self.down:
            h = block(h, emb)
            skips.append(h)
        return skips

    def _taps(self, skips):
        return FeatureMaps(skips[self.config.shallow_tap_level], skips[self.config.deep_tap_level])

    def forward(self, x, t, encoder_only=False):
        """Returns ``(x1_pred, FeatureMaps)``, or just the features if ``encoder_only``."""
        self._check_input(x)
        emb = self._time(t, x.shape[0], x.dtype)
        skips = self._encode(x, emb)
        if encoder_only:
            return self._taps(skips)
        h = skips[-1]
        for block, skip in zip(self.up, reversed(skips[1:-1])):
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skip], dim=1), emb)
        h = F.interpolate(h, size=x.shape[-2:], mode="bilinear", align_corners=False)
        h = self.head_block(torch.cat([h, skips[0]], dim=1), emb)
        return torch.tanh(self.out(h)), self._taps(skips)

    def extract_features(self, x, t_feat=0.0, detach_params=False):
        """Encoder-only pass returning the shallow and deep taps.

        With ``detach_params`` the weights are used as constants, so gradients
        reach the parameters only through ``x``.
        """
        if not detach_params:
            return self(x, t_feat, encoder_only=True)
        params = {k: v.detach() for k, v in self.named_parameters()}
        return functional_call(self, params, (x, t_feat), {"encoder_only": True})

    @torch.no_grad()
    def predict(self, x, t):
        """Eval-mode terminal prediction without gradient bookkeeping."""
        was_training = self.training
        self.eval()
        try:
            return self(x, t)[0]
        finally:
            self.train(was_training)

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


def parameter_fingerprint(module):
    """SHA-256 over parameter and buffer bytes, in registration order."""
    h = hashlib.sha256()
    for name, tensor in list(module.named_parameters()) + list(module.named_buffers()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
