"""Overlap/surface metrics, distribution distances and display helpers.

``fid_proxy`` and ``kid_proxy`` embed images with a fixed, never-trained
random CNN. Their absolute values are not comparable with Inception-based
FID/KID; only relative changes between runs are meaningful.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import InvalidInputError, UndefinedMetricError
from .phantom import boundary_of
from .registration import warp

__all__ = [
    "dsc", "iou", "asd", "FeatureExtractorProxy", "frechet_distance", "mmd2_unbiased",
    "fid_proxy", "kid_proxy", "kid_bootstrap_stderr", "chessboard_composite",
    "evaluate_registration", "MetricsReport", "write_report", "PROXY_NOTE",
    "sobel_magnitude", "boundary_correlation",
]

PROXY_NOTE = ("fid_proxy/kid_proxy use a fixed random feature extractor; "
              "absolute values are not comparable to Inception FID/KID, only reductions are")


def _masks(X, Y):
    X = np.asarray(X) > 0
    Y = np.asarray(Y) > 0
    if X.shape != Y.shape:
        raise InvalidInputError(f"mask shapes differ: {X.shape} vs {Y.shape}")
    return X, Y


def dsc(X, Y):
    """Dice coefficient ``2|X & Y| / (|X| + |Y|)``."""
    X, Y = _masks(X, Y)
    denom = int(X.sum()) + int(Y.sum())
    if denom == 0:
        raise UndefinedMetricError("Dice is undefined for two empty masks")
    return 2.0 * int((X & Y).sum()) / denom


def iou(X, Y):
    """Intersection over union ``|X & Y| / |X | Y|``."""
    X, Y = _masks(X, Y)
    union = int((X | Y).sum())
    if union == 0:
        raise UndefinedMetricError("IoU is undefined for two empty masks")
    return int((X & Y).sum()) / union


def _directed_surface_distance(bx, by):
    # exact Euclidean distance from every boundary pixel of X to the nearest of Y
    dist = ndimage.distance_transform_edt(~by)
    return dist[bx]


def asd(X, Y):
    """Symmetric average surface distance in pixels.

    Boundaries are the 4-neighbourhood erosion bands; each direction is
    averaged over its own boundary pixels and the two means are averaged.
    """
    X, Y = _masks(X, Y)
    if not X.any() or not Y.any():
        raise UndefinedMetricError("ASD needs two non-empty masks")
    bx = boundary_of(X).astype(bool)
    by = boundary_of(Y).astype(bool)
    return 0.5 * (_directed_surface_distance(bx, by).mean()
                  + _directed_surface_distance(by, bx).mean())


class FeatureExtractorProxy:
    """Fixed random 3-layer strided CNN -> 32-dim globally pooled descriptor."""

    channels = (1, 8, 16, 32)

    def __init__(self, seed=0):
        self.seed = int(seed)
        g = torch.Generator().manual_seed(self.seed)
        self.weights = []
        for cin, cout in zip(self.channels[:-1], self.channels[1:]):
            w = torch.randn(cout, cin, 4, 4, generator=g, dtype=torch.float64)
            w *= math.sqrt(2.0 / (cin * 16))
            b = 0.1 * torch.randn(cout, generator=g, dtype=torch.float64)
            self.weights.append((w, b))

    @property
    def dim(self):
        return self.channels[-1]

    def __call__(self, images, batch_size=256):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if images.ndim != 3:
            raise InvalidInputError(f"expected (N, H, W) images, got {images.shape}")
        feats = []
        with torch.no_grad():
            for k in range(0, len(images), batch_size):
                h = torch.from_numpy(images[k:k + batch_size])[:, None]
                for w, b in self.weights:
                    h = F.relu(F.conv2d(h, w, b, stride=2, padding=1))
                feats.append(h.mean(dim=(2, 3)).numpy())
        return np.concatenate(feats) if feats else np.zeros((0, self.dim))


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(feats_a, feats_b, eps=1e-6):
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` on descriptors."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise InvalidInputError("need at least 2 samples per set")
    d = a.shape[1]
    cov_a = np.cov(a, rowvar=False) + eps * np.eye(d)
    cov_b = np.cov(b, rowvar=False) + eps * np.eye(d)
    root_a = _psd_sqrt(cov_a)
    # Tr((S_a S_b)^(1/2)) = Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), a symmetric PSD product
    inner = root_a @ cov_b @ root_a
    eig = np.clip(np.linalg.eigvalsh(0.5 * (inner + inner.T)), 0.0, None)
    diff = a.mean(0) - b.mean(0)
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sqrt(eig).sum()
    return max(float(value), 0.0)


def _poly_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(feats_a, feats_b):
    """Unbiased MMD^2 with the cubic polynomial kernel ``(x.y / d + 1)^3``."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise InvalidInputError("need at least 2 samples per set")
    kaa = _poly_kernel(a, a)
    kbb = _poly_kernel(b, b)
    kab = _poly_kernel(a, b)
    return float((kaa.sum() - np.trace(kaa)) / (m * (m - 1))
                 + (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
                 - 2.0 * kab.mean())


def _features(images, extractor):
    extractor = extractor or FeatureExtractorProxy()
    return extractor(images)


def fid_proxy(set_a, set_b, extractor=None):
    """Fréchet distance between proxy descriptors of two image sets."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise InvalidInputError("fid_proxy needs at least 2 images per set")
    return frechet_distance(_features(set_a, extractor), _features(set_b, extractor))


def kid_proxy(set_a, set_b, extractor=None):
    """Unbiased polynomial-kernel MMD^2 between proxy descriptors."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise InvalidInputError("kid_proxy needs at least 2 images per set")
    return mmd2_unbiased(_features(set_a, extractor), _features(set_b, extractor))


def kid_bootstrap_stderr(feats_a, feats_b, n_boot=200, seed=0):
    """Bootstrap standard error of :func:`mmd2_unbiased` (resampling each set)."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    rng = np.random.default_rng(seed)
    values = [mmd2_unbiased(a[rng.integers(0, len(a), len(a))],
                            b[rng.integers(0, len(b), len(b))]) for _ in range(n_boot)]
    return float(np.std(values, ddof=1))


def chessboard_composite(a, b, block):
    """Alternate ``block x block`` tiles of ``a`` and ``b``; top-left tile from ``a``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 2:
        raise InvalidInputError(f"need equal 2D shapes, got {a.shape} and {b.shape}")
    if block < 1:
        raise InvalidInputError("block must be >= 1")
    yy, xx = np.indices(a.shape)
    from_a = ((yy // block + xx // block) % 2) == 0
    return np.where(from_a, a, b)


def sobel_magnitude(image):
    """Gradient magnitude from the two 3x3 Sobel responses (reflected borders)."""
    image = np.asarray(image, dtype=np.float64)
    return np.hypot(ndimage.sobel(image, 0), ndimage.sobel(image, 1))


def boundary_correlation(images, boundary_masks):
    """Mean Pearson correlation between Sobel magnitude and a boundary mask.

    Higher values mean the edges of an image sit on the anatomical boundary.
    """
    values = []
    for img, mask in zip(images, boundary_masks):
        mag = sobel_magnitude(img).ravel()
        m = (np.asarray(mask) > 0).ravel().astype(np.float64)
        if mag.std() == 0 or m.std() == 0:
            raise UndefinedMetricError("correlation is undefined for a constant image or mask")
        values.append(np.corrcoef(mag, m)[0, 1])
    if not values:
        raise InvalidInputError("need at least one image")
    return float(np.mean(values))


@dataclass
class MetricsReport:
    dsc: float | None = None
    iou: float | None = None
    asd_px: float | None = None
    fid_proxy: float | None = None
    kid_proxy: float | None = None
    n_pairs: int = 0
    n_images_a: int = 0
    n_images_b: int = 0

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def evaluate_registration(field, mask_moving, mask_fixed):
    """Warp the moving mask (nearest) and score it against the fixed mask."""
    mask_moving = np.asarray(mask_moving)
    mask_fixed = np.asarray(mask_fixed)
    if mask_moving.shape != mask_fixed.shape:
        raise InvalidInputError(f"mask shapes differ: {mask_moving.shape} vs {mask_fixed.shape}")
    warped = warp(mask_moving, field, "nearest")
    return MetricsReport(dsc=dsc(warped, mask_fixed), iou=iou(warped, mask_fixed),
                         asd_px=asd(warped, mask_fixed), n_pairs=1)


def write_report(path, report, mode, extra=None):
    """Write a JSON report with the canonical metric names."""
    payload = {"mode": mode, **report.to_dict()}
    if report.fid_proxy is not None or report.kid_proxy is not None:
        payload["note"] = PROXY_NOTE
    payload.update(extra or {})
    Path(path).write_text(json.dumps(payload, indent=1))
    return payload
