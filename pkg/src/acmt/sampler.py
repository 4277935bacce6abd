"""Inference: carry MR or US images along the bridge to the intermediate modality."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .bridge import diffusion_step
from .checkpoint import Checkpoint
from .errors import InvalidInputError
from .network import TranslatorNet
from .phantom import PairedSample, load_dataset, write_manifest, write_sample

logger = logging.getLogger(__name__)

__all__ = ["TranslateOptions", "time_grid", "translate", "translate_images", "translate_dataset"]


@dataclass(frozen=True)
class TranslateOptions:
    nfe: int | None = None  # None -> one step per pool entry
    stochastic: bool = False
    seed: int = 0


def time_grid(pool, nfe=None):
    """Pool times used for ``nfe`` steps (evenly subsampled, always from 0), then 1."""
    pool = tuple(pool)
    nfe = len(pool) if nfe is None else int(nfe)
    if not 1 <= nfe <= len(pool):
        raise InvalidInputError(f"nfe must be in [1, {len(pool)}], got {nfe}")
    idx = np.round(np.linspace(0, len(pool) - 1, nfe)).astype(int)
    return [pool[k] for k in idx] + [1.0]


def _resolve(net, bridge):
    if isinstance(net, Checkpoint):
        if net.epoch < 1:
            raise InvalidInputError("checkpoint has not been trained (epoch 0)")
        return net.build_network(), bridge or net.bridge
    if isinstance(net, TranslatorNet):
        if bridge is None:
            raise InvalidInputError("a BridgeConfig is required with a bare network")
        return net, bridge
    raise InvalidInputError(f"expected a Checkpoint or TranslatorNet, got {type(net).__name__}")


def translate(x0, net, bridge=None, opts=None):
    """Translate a ``(B, 1, H, W)`` tensor of source images.

    The last step always lands on ``t = 1`` where the noise variance and the
    weight on the current state are zero, so the output is exactly a network
    prediction.
    """
    opts = opts or TranslateOptions()
    net, bridge = _resolve(net, bridge)
    if torch.is_tensor(x0) and ((x0 < -1).any() or (x0 > 1).any()):
        raise InvalidInputError("source images must lie in [-1, 1]")
    times = time_grid(bridge.timestep_pool, opts.nfe)
    sigma = bridge.sigma if opts.stochastic else 0.0
    generator = torch.Generator().manual_seed(int(opts.seed))
    x = x0
    for t_j, t_next in zip(times[:-1], times[1:]):
        x = diffusion_step(x, net.predict(x, t_j), t_j, t_next, sigma, generator)
    return x


def translate_images(images, net, bridge=None, opts=None, batch_size=32):
    """Numpy convenience: ``(N, H, W)`` or a list of 2D arrays -> ``(N, H, W)`` float32."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 2:
        images = images[None]
    net, bridge = _resolve(net, bridge)
    out = []
    for k in range(0, len(images), batch_size):
        chunk = torch.from_numpy(images[k:k + batch_size])[:, None]
        out.append(translate(chunk, net, bridge, opts)[:, 0].numpy())
    if not out:
        return np.zeros((0, *images.shape[1:]), dtype=np.float32)
    return np.concatenate(out)


def translate_dataset(data_dir, checkpoint, opts=None, out_dir=None):
    """Translate every MR and US image of a dataset directory.

    Writes ``acmt_mr_{id}.png`` / ``acmt_us_{id}.png`` plus copies of the
    masks and fields under the original ids, and a manifest. Returns
    ``(manifest, errors)``; samples that failed are listed in ``errors`` and
    the manifest is flagged ``partial``.
    """
    opts = opts or TranslateOptions()
    samples, ids = load_dataset(data_dir, with_ids=True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net, bridge = _resolve(checkpoint, None)
    entries, errors = [], []
    image_size = samples[0].shape if samples else None
    if samples:
        mr = translate_images([s.mr for s in samples], net, bridge, opts)
        us = translate_images([s.us for s in samples], net, bridge, opts)
    for k, (sid, s) in enumerate(zip(ids, samples)):
        translated = PairedSample(mr=mr[k], us=us[k], boundary_mask=s.boundary_mask,
                                  zone_mask=s.zone_mask, gt_field=s.gt_field, seed=s.seed)
        try:
            entries.append(write_sample(out_dir, sid, translated, image_prefix="acmt_"))
        except OSError as exc:
            logger.error("failed to write sample %s: %s", sid, exc)
            errors.append({"id": sid, "error": str(exc)})
    extra = {"source": str(data_dir), "translation": {"nfe": opts.nfe, "stochastic": opts.stochastic,
                                                      "seed": opts.seed}}
    if errors:
        extra.update(partial=True, errors=errors)
    manifest = write_manifest(out_dir, entries, image_size, extra)
    logger.info("translated %d pairs into %s (%d errors)", len(entries), out_dir, len(errors))
    return manifest, errors
