import json

import numpy as np
import pytest
from scipy import ndimage

from acmt.errors import CorruptDatasetError, InvalidInputError
from acmt.phantom import (AUGMENT_OPS, augment_pair, boundary_of, erode4, fixed_zone_mask,
                          generate_dataset, generate_phantom, load_dataset, read_field,
                          save_dataset)
from acmt.registration import warp


@pytest.fixture(scope="module")
def sample():
    return generate_phantom(7, (64, 64))


def test_same_seed_is_bit_identical(sample):
    assert sample.identical(generate_phantom(7, (64, 64)))


def test_different_seed_changes_anatomy(sample):
    other = generate_phantom(8, (64, 64))
    assert (other.zone_mask != sample.zone_mask).sum() >= 1


def test_boundary_is_mask_minus_erosion(sample):
    z = sample.zone_mask.astype(bool)
    assert np.array_equal(sample.boundary_mask.astype(bool), z ^ erode4(z))


@pytest.mark.parametrize("seed", range(0, 200, 7))
def test_invariants(seed):
    s = generate_phantom(seed, (64, 48))
    H, W = 64, 48
    assert s.mr.shape == s.us.shape == s.zone_mask.shape == s.boundary_mask.shape == (H, W)
    assert s.gt_field.shape == (2, H, W)
    _, n = ndimage.label(s.zone_mask, structure=ndimage.generate_binary_structure(2, 1))
    assert n == 1
    assert 0.08 <= s.zone_mask.mean() <= 0.45
    assert np.isfinite(s.mr).all() and np.isfinite(s.us).all()
    assert s.mr.min() >= -1 and s.mr.max() <= 1 and s.us.min() >= -1 and s.us.max() <= 1
    assert np.hypot(s.gt_field[0], s.gt_field[1]).max() <= 5.0 + 1e-5


def test_displacement_bound_is_configurable():
    s = generate_phantom(3, (64, 64), max_displacement=2.0)
    assert np.hypot(*s.gt_field).max() <= 2.0 + 1e-6


def test_speckle_variance_exceeds_mr_noise_on_100_seeds():
    def local_var(img, mask):
        img = img.astype(np.float64)
        return np.var((img - ndimage.uniform_filter(img, 5))[mask])

    for seed in range(100):
        s = generate_phantom(seed)
        z = s.zone_mask.astype(bool)
        assert local_var(s.us, z) >= 2 * local_var(s.mr, z), seed


def test_us_anatomy_follows_gt_field():
    # the US frame gland is darker than its surroundings in every sample
    for s in generate_dataset(10, base_seed=50):
        inside = fixed_zone_mask(s).astype(bool)
        assert s.us[inside].mean() < s.us[~inside].mean()
        assert s.mr[s.zone_mask.astype(bool)].mean() > s.mr[~s.zone_mask.astype(bool)].mean()


def test_no_global_rng_state_consulted():
    np.random.seed(1)
    a = generate_phantom(11)
    np.random.seed(2)
    np.random.random(100)
    assert a.identical(generate_phantom(11))


@pytest.mark.parametrize("size", [(31, 64), (64, 16), (0, 0)])
def test_invalid_size_rejected(size):
    with pytest.raises(InvalidInputError):
        generate_phantom(0, size)


# ---------------------------------------------------------------- augmentation


def test_flip_h_is_involution(sample):
    assert augment_pair(augment_pair(sample, "flip_h"), "flip_h").identical(sample)


def test_rot90_four_times_is_identity(sample):
    s = sample
    for _ in range(4):
        s = augment_pair(s, "rot90")
    assert s.identical(sample)


def test_flip_h_mirrors_centroid(sample):
    W = sample.shape[1]
    c_before = ndimage.center_of_mass(sample.zone_mask)[1]
    c_after = ndimage.center_of_mass(augment_pair(sample, "flip_h").zone_mask)[1]
    assert c_after == pytest.approx(W - 1 - c_before, abs=1e-9)


@pytest.mark.parametrize("op", AUGMENT_OPS)
def test_field_transforms_consistently_with_images(sample, op):
    # warping then transforming equals transforming then warping
    image_ops = {
        "flip_h": lambda a: a[:, ::-1],
        "flip_v": lambda a: a[::-1],
        "rot90": lambda a: np.rot90(a, 1),
        "rot180": lambda a: np.rot90(a, 2),
        "rot270": lambda a: np.rot90(a, 3),
    }
    aug = augment_pair(sample, op)
    img = sample.mr.astype(np.float64)
    lhs = warp(image_ops[op](img), aug.gt_field.astype(np.float64))
    rhs = image_ops[op](warp(img, sample.gt_field.astype(np.float64)))
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)
    assert np.array_equal(aug.boundary_mask, boundary_of(aug.zone_mask))


def test_rot90_rejects_non_square():
    s = generate_phantom(0, (64, 48))
    with pytest.raises(InvalidInputError):
        augment_pair(s, "rot90")
    augment_pair(s, "rot180")  # fine on any shape


def test_unknown_op_rejected(sample):
    with pytest.raises(InvalidInputError):
        augment_pair(sample, "shear")


# ---------------------------------------------------------------- storage


def test_round_trip_within_quantisation(tmp_path):
    samples = generate_dataset(3, base_seed=40)
    manifest = save_dataset(samples, tmp_path)
    loaded = load_dataset(tmp_path)
    assert len(loaded) == 3 and manifest.image_size == (64, 64)
    for a, b in zip(samples, loaded):
        assert np.abs(a.mr.astype(np.float64) - b.mr).max() <= 1 / 65535 + 1e-7
        assert np.abs(a.us.astype(np.float64) - b.us).max() <= 1 / 65535 + 1e-7
        assert np.array_equal(a.zone_mask, b.zone_mask)
        assert np.array_equal(a.boundary_mask, b.boundary_mask)
        assert np.array_equal(a.gt_field, b.gt_field)
        assert a.seed == b.seed


def test_file_layout(tmp_path):
    save_dataset(generate_dataset(2), tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert len(names) == 2 * 6 + 1
    assert "manifest.json" in names and "mr_00000.png" in names and "field_00001.json" in names
    from PIL import Image
    with Image.open(tmp_path / "mr_00000.png") as im:
        assert np.array(im).dtype == np.uint16
    with Image.open(tmp_path / "zone_00000.png") as im:
        arr = np.array(im)
        assert arr.dtype == np.uint8 and set(np.unique(arr)) <= {0, 255}
    sidecar = json.loads((tmp_path / "field_00000.json").read_text())
    assert sidecar["shape"] == [2, 64, 64]
    raw = np.fromfile(tmp_path / "field_00000.bin", dtype="<f4")
    assert raw.size == 2 * 64 * 64
    np.testing.assert_array_equal(raw.reshape(2, 64, 64), read_field(tmp_path / "field_00000.bin"))


def test_missing_file_is_corrupt(tmp_path):
    save_dataset(generate_dataset(2), tmp_path)
    (tmp_path / "us_00001.png").unlink()
    with pytest.raises(CorruptDatasetError):
        load_dataset(tmp_path)


def test_tampered_file_is_corrupt(tmp_path):
    save_dataset(generate_dataset(1), tmp_path)
    path = tmp_path / "field_00000.bin"
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CorruptDatasetError):
        load_dataset(tmp_path)


def test_duplicate_ids_are_corrupt(tmp_path):
    save_dataset(generate_dataset(2), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["samples"][1]["id"] = m["samples"][0]["id"]
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CorruptDatasetError):
        load_dataset(tmp_path)


def test_empty_dataset(tmp_path):
    manifest = save_dataset([], tmp_path, image_size=(64, 64))
    assert manifest.samples == []
    assert load_dataset(tmp_path) == []
