"""Synthetic paired MR-like / US-like prostate phantoms.

Each phantom shares one anatomy (a star-shaped gland with an inner zone)
between two renderings. The MR rendering is piecewise-smooth with a bias
field and mild Gaussian noise. The US rendering first deforms the anatomy by
a smooth ground-truth field and then applies Rayleigh speckle, depth
attenuation, specular rims on beam-facing boundaries and log compression.

``zone_mask`` and ``boundary_mask`` live in the MR frame. The US-frame masks
are ``warp(mask, gt_field, "nearest")``, see :func:`fixed_zone_mask`.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import CorruptDatasetError, InvalidInputError
from .registration import warp

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "1.0"
AUGMENT_OPS = ("flip_h", "flip_v", "rot90", "rot180", "rot270")
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(eq=False)
class PairedSample:
    mr: np.ndarray
    us: np.ndarray
    boundary_mask: np.ndarray
    zone_mask: np.ndarray
    gt_field: np.ndarray
    seed: int
    meta: dict = dc_field(default_factory=dict)

    @property
    def shape(self):
        return self.mr.shape

    def identical(self, other):
        """Bit-identical comparison of every array and the seed."""
        names = ("mr", "us", "boundary_mask", "zone_mask", "gt_field")
        return self.seed == other.seed and all(
            getattr(self, n).dtype == getattr(other, n).dtype
            and np.array_equal(getattr(self, n), getattr(other, n))
            for n in names
        )


def erode4(mask):
    """Binary erosion with the 4-neighbourhood; outside the image counts as 0."""
    return ndimage.binary_erosion(np.asarray(mask, bool), structure=_CROSS, border_value=0)


def boundary_of(mask):
    """One-pixel inner boundary band: ``mask XOR erode4(mask)``."""
    mask = np.asarray(mask, bool)
    return (mask ^ erode4(mask)).astype(np.uint8)


def fixed_zone_mask(sample):
    """Zone mask carried into the US frame by the ground-truth field."""
    return warp(sample.zone_mask, sample.gt_field, "nearest")


def fixed_boundary_mask(sample):
    return boundary_of(fixed_zone_mask(sample))


def _smooth_noise(rng, shape, sigma):
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return noise / (np.abs(noise).max() + 1e-12)


def _anatomy(rng, H, W):
    yy, xx = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    cy = (H - 1) / 2 + rng.uniform(-0.08, 0.08) * H
    cx = (W - 1) / 2 + rng.uniform(-0.08, 0.08) * W
    area = rng.uniform(0.12, 0.28) * H * W
    r0 = np.sqrt(area / np.pi)
    aspect = rng.uniform(0.8, 1.25)
    ry, rx = r0 * aspect, r0 / aspect
    phi = rng.uniform(0, np.pi)
    harmonics = [(k, rng.uniform(0, 0.06), rng.uniform(0, 2 * np.pi)) for k in (2, 3, 4)]

    def radius(theta):
        return 1 + sum(c * np.cos(k * theta + p) for k, c, p in harmonics)

    def normalised(dy, dx):
        c, s = np.cos(phi), np.sin(phi)
        v = (c * dy - s * dx) / ry
        u = (s * dy + c * dx) / rx
        return np.hypot(v, u), np.arctan2(v, u)

    rho, theta = normalised(yy - cy, xx - cx)
    gland = rho <= radius(theta)
    # inner zone sits anteriorly (towards row 0) inside the gland
    rho_i, theta_i = normalised(yy - (cy - 0.15 * r0), xx - cx)
    inner = (rho_i <= 0.55 * radius(theta_i)) & gland
    labels = gland.astype(np.int64) + inner.astype(np.int64)
    return labels


def _render_mr(rng, labels):
    H, W = labels.shape
    levels = np.array([
        rng.uniform(-0.55, -0.35),  # background
        rng.uniform(0.35, 0.55),    # peripheral zone
        rng.uniform(0.0, 0.2),      # inner zone
    ])
    img = ndimage.gaussian_filter(levels[labels], 0.6)
    img += rng.uniform(0.04, 0.1) * _smooth_noise(rng, (H, W), H / 4)
    img += rng.normal(0.0, 0.03, size=(H, W))
    return np.clip(img, -1.0, 1.0)


def _render_us(rng, labels):
    H, W = labels.shape
    reflect = np.array([
        rng.uniform(0.55, 0.7),
        rng.uniform(0.2, 0.3),
        rng.uniform(0.3, 0.4),
    ])[labels]
    # specular rims are brightest where the boundary normal faces the beam (axis 0)
    soft = ndimage.gaussian_filter((labels > 0).astype(float), 0.8)
    gy, gx = np.gradient(soft)
    rim = np.abs(gy) / (np.abs(gy).max() + 1e-12)
    reflect = reflect + rng.uniform(0.5, 0.8) * rim
    depth = np.arange(H, dtype=float)[:, None] / H
    reflect = reflect * np.exp(-rng.uniform(0.5, 0.9) * depth)

    re = ndimage.gaussian_filter(rng.standard_normal((H, W)), (0.6, 1.0))
    im = ndimage.gaussian_filter(rng.standard_normal((H, W)), (0.6, 1.0))
    speckle = np.hypot(re, im)
    speckle /= np.sqrt(np.mean(speckle ** 2))

    envelope = reflect * speckle
    k = 10.0
    compressed = np.log1p(k * envelope) / np.log1p(k * 1.5)
    return np.clip(2.0 * compressed - 1.0, -1.0, 1.0)


def generate_phantom(seed, size=(64, 64), max_displacement=5.0):
    """Generate one MR/US phantom pair; fully determined by ``seed``."""
    H, W = (int(size), int(size)) if np.isscalar(size) else map(int, size)
    if H < 32 or W < 32:
        raise InvalidInputError(f"phantom size must be at least 32x32, got {(H, W)}")
    if not max_displacement > 0:
        raise InvalidInputError("max_displacement must be positive")
    rng = np.random.default_rng(seed)

    for _ in range(100):
        labels = _anatomy(rng, H, W)
        zone = labels > 0
        _, n_components = ndimage.label(zone, structure=_CROSS)
        frac = zone.mean()
        if n_components == 1 and 0.08 <= frac <= 0.45:
            break
    else:  # pragma: no cover - the shape prior makes this practically unreachable
        raise RuntimeError(f"could not draw a valid anatomy for seed {seed}")

    field = np.stack([_smooth_noise(rng, (H, W), H / 6) for _ in range(2)])
    field *= rng.uniform(0.5, 1.0) * max_displacement / np.hypot(field[0], field[1]).max()

    mr = _render_mr(rng, labels)
    us = _render_us(rng, warp(labels, field, "nearest"))
    zone_mask = zone.astype(np.uint8)
    return PairedSample(
        mr=mr.astype(np.float32),
        us=us.astype(np.float32),
        boundary_mask=boundary_of(zone_mask),
        zone_mask=zone_mask,
        gt_field=field.astype(np.float32),
        seed=int(seed),
    )


def generate_dataset(count, size=(64, 64), base_seed=0, max_displacement=5.0):
    """Sample ``i`` uses seed ``base_seed + i``."""
    return [generate_phantom(base_seed + i, size, max_displacement) for i in range(count)]


def _transform_field(field, op):
    dy, dx = field[0], field[1]
    if op == "flip_h":
        return np.stack([dy[:, ::-1], -dx[:, ::-1]])
    if op == "flip_v":
        return np.stack([-dy[::-1, :], dx[::-1, :]])
    if op == "rot90":
        # np.rot90 maps output pixel q to input pixel (q_x, W-1-q_y)
        return np.stack([-np.rot90(dx), np.rot90(dy)])
    if op == "rot180":
        return _transform_field(_transform_field(field, "rot90"), "rot90")
    if op == "rot270":
        return _transform_field(_transform_field(field, "rot180"), "rot90")
    raise InvalidInputError(f"unknown augmentation {op!r}")


def _transform_image(a, op):
    return {
        "flip_h": lambda: a[:, ::-1],
        "flip_v": lambda: a[::-1, :],
        "rot90": lambda: np.rot90(a, 1),
        "rot180": lambda: np.rot90(a, 2),
        "rot270": lambda: np.rot90(a, 3),
    }[op]()


def augment_pair(sample, op):
    """Apply one flip/rotation consistently to images, masks and field."""
    if op not in AUGMENT_OPS:
        raise InvalidInputError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")
    H, W = sample.shape
    if op in ("rot90", "rot270") and H != W:
        raise InvalidInputError(f"{op} needs square images, got {(H, W)}")
    t = lambda a: np.ascontiguousarray(_transform_image(a, op))  # noqa: E731
    return PairedSample(
        mr=t(sample.mr),
        us=t(sample.us),
        boundary_mask=t(sample.boundary_mask),
        zone_mask=t(sample.zone_mask),
        gt_field=np.ascontiguousarray(_transform_field(sample.gt_field, op)),
        seed=sample.seed,
        meta=dict(sample.meta),
    )


# --------------------------------------------------------------------------
# on-disk layout


@dataclass
class DatasetManifest:
    version: str
    samples: list
    image_size: tuple | None
    extra: dict = dc_field(default_factory=dict)

    def to_json(self):
        return {
            "version": self.version,
            "image_size": list(self.image_size) if self.image_size else None,
            "samples": self.samples,
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_json(cls, data):
        size = data.get("image_size")
        return cls(
            version=data["version"],
            samples=list(data["samples"]),
            image_size=tuple(size) if size else None,
            extra=data.get("extra", {}),
        )


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def encode_image(img):
    """[-1, 1] floats -> uint16 via round((v + 1) / 2 * 65535)."""
    img = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.round((img + 1.0) / 2.0 * 65535.0).astype(np.uint16)


def decode_image(arr):
    return (np.asarray(arr, dtype=np.float64) / 65535.0 * 2.0 - 1.0).astype(np.float32)


def write_image(path, img):
    Image.fromarray(encode_image(img)).save(path, format="PNG")


def read_image(path):
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.dtype != np.uint16:
        arr = arr.astype(np.uint16)
    return decode_image(arr)


def write_mask(path, mask):
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def read_mask(path):
    with Image.open(path) as im:
        return (np.array(im) > 0).astype(np.uint8)


def write_field(path, field):
    """Write ``field_*.bin`` (little-endian float32, (2, H, W) row-major) + JSON sidecar."""
    path = Path(path)
    field = np.asarray(field, dtype="<f4")
    if field.ndim != 3 or field.shape[0] != 2:
        raise InvalidInputError(f"field must have shape (2, H, W), got {field.shape}")
    path.write_bytes(np.ascontiguousarray(field).tobytes(order="C"))
    sidecar = {"shape": list(field.shape), "dtype": "float32", "byte_order": "little",
               "channels": ["dy", "dx"]}
    path.with_suffix(".json").write_text(json.dumps(sidecar))


def read_field(path):
    path = Path(path)
    try:
        sidecar = json.loads(path.with_suffix(".json").read_text())
        shape = tuple(sidecar["shape"])
        data = np.frombuffer(path.read_bytes(), dtype="<f4")
    except (OSError, ValueError, KeyError) as exc:
        raise CorruptDatasetError(f"cannot read field {path}: {exc}") from exc
    if data.size != int(np.prod(shape)) or len(shape) != 3 or shape[0] != 2:
        raise CorruptDatasetError(f"field {path} has {data.size} values, sidecar says {shape}")
    return data.reshape(shape).astype(np.float32)


def _sample_files(sid, image_prefix=""):
    return {
        "mr": f"{image_prefix}mr_{sid}.png",
        "us": f"{image_prefix}us_{sid}.png",
        "zone": f"zone_{sid}.png",
        "boundary": f"boundary_{sid}.png",
        "field": f"field_{sid}.bin",
        "field_meta": f"field_{sid}.json",
    }


def write_sample(directory, sid, sample, image_prefix=""):
    """Write one sample's files; returns its manifest entry."""
    directory = Path(directory)
    files = _sample_files(sid, image_prefix)
    write_image(directory / files["mr"], sample.mr)
    write_image(directory / files["us"], sample.us)
    write_mask(directory / files["zone"], sample.zone_mask)
    write_mask(directory / files["boundary"], sample.boundary_mask)
    write_field(directory / files["field"], sample.gt_field)
    return {
        "id": sid,
        "seed": int(sample.seed),
        **files,
        "sha256": {k: _sha256(directory / v) for k, v in files.items()},
    }


def write_manifest(directory, entries, image_size, extra=None):
    manifest = DatasetManifest(MANIFEST_VERSION, list(entries),
                               tuple(image_size) if image_size else None, extra or {})
    tmp = Path(directory) / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest.to_json(), indent=1))
    os.replace(tmp, Path(directory) / "manifest.json")
    return manifest


def save_dataset(samples, directory, image_size=None, ids=None, image_prefix="", extra=None):
    """Write samples and ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    ids = list(ids) if ids is not None else [f"{i:05d}" for i in range(len(samples))]
    if len(set(ids)) != len(ids) or len(ids) != len(samples):
        raise InvalidInputError("sample ids must be unique and match the sample count")
    if samples:
        image_size = samples[0].shape
    entries = []
    for sid, s in zip(ids, samples):
        if s.shape != tuple(image_size):
            raise InvalidInputError(f"sample {sid} has shape {s.shape}, expected {image_size}")
        entries.append(write_sample(directory, sid, s, image_prefix))
    manifest = write_manifest(directory, entries, image_size, extra)
    logger.info("saved %d samples to %s", len(entries), directory)
    return manifest


def read_manifest(directory):
    path = Path(directory) / "manifest.json"
    try:
        manifest = DatasetManifest.from_json(json.loads(path.read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise CorruptDatasetError(f"unreadable manifest {path}: {exc}") from exc
    if manifest.version.split(".")[0] != MANIFEST_VERSION.split(".")[0]:
        raise CorruptDatasetError(f"unsupported manifest version {manifest.version}")
    ids = [e["id"] for e in manifest.samples]
    if len(set(ids)) != len(ids):
        raise CorruptDatasetError("duplicate sample ids in manifest")
    return manifest


def load_dataset(directory, with_ids=False):
    """Load and validate a dataset written by :func:`save_dataset`."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    samples = []
    for entry in manifest.samples:
        for key, checksum in entry["sha256"].items():
            path = directory / entry[key]
            if not path.is_file():
                raise CorruptDatasetError(f"missing file {path}")
            if _sha256(path) != checksum:
                raise CorruptDatasetError(f"checksum mismatch for {path}")
        try:
            s = PairedSample(
                mr=read_image(directory / entry["mr"]),
                us=read_image(directory / entry["us"]),
                boundary_mask=read_mask(directory / entry["boundary"]),
                zone_mask=read_mask(directory / entry["zone"]),
                gt_field=read_field(directory / entry["field"]),
                seed=int(entry["seed"]),
                meta={"id": entry["id"]},
            )
        except (OSError, ValueError) as exc:
            raise CorruptDatasetError(f"cannot decode sample {entry['id']}: {exc}") from exc
        expected = tuple(manifest.image_size)
        shapes = {s.mr.shape, s.us.shape, s.zone_mask.shape, s.boundary_mask.shape,
                  s.gt_field.shape[1:]}
        if shapes != {expected}:
            raise CorruptDatasetError(f"sample {entry['id']} shapes {shapes} != {expected}")
        samples.append(s)
    if with_ids:
        return samples, [e["id"] for e in manifest.samples]
    return samples
