import json

import numpy as np
import pytest
import torch

from acmt.bridge import BridgeConfig
from acmt.checkpoint import Checkpoint
from acmt.errors import InvalidInputError
from acmt.network import NetworkConfig, TranslatorNet
from acmt.objectives import LossWeights
from acmt.phantom import generate_dataset, load_dataset, save_dataset
from acmt.sampler import TranslateOptions, time_grid, translate, translate_dataset, translate_images

SMALL = NetworkConfig(levels=3, base_channels=8, time_embed_dim=16, image_size=(32, 32))


@pytest.fixture(scope="module")
def ckpt():
    torch.manual_seed(0)
    net = TranslatorNet(SMALL)
    return Checkpoint(SMALL, BridgeConfig(), LossWeights(), net.state_dict(), epoch=1)


def test_time_grid():
    pool = BridgeConfig().timestep_pool
    assert time_grid(pool) == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    assert time_grid(pool, 1) == [0.0, 1.0]
    assert time_grid(pool, 3) == [0.0, 0.4, 0.8, 1.0]
    for bad in (0, 6):
        with pytest.raises(InvalidInputError):
            time_grid(pool, bad)


def test_single_step_is_direct_prediction(ckpt):
    x = torch.rand(3, 1, 32, 32) * 2 - 1
    net = ckpt.build_network()
    out = translate(x, ckpt, opts=TranslateOptions(nfe=1))
    assert torch.equal(out, net(x, 0.0)[0])


def test_deterministic_runs(ckpt):
    x = torch.rand(3, 1, 32, 32) * 2 - 1
    assert torch.equal(translate(x, ckpt), translate(x, ckpt))
    s1 = translate(x, ckpt, opts=TranslateOptions(stochastic=True, seed=4))
    s2 = translate(x, ckpt, opts=TranslateOptions(stochastic=True, seed=4))
    assert torch.equal(s1, s2)


def test_untrained_checkpoint_rejected(ckpt):
    fresh = Checkpoint(SMALL, BridgeConfig(), LossWeights(), ckpt.state_dict, epoch=0)
    with pytest.raises(InvalidInputError):
        translate(torch.zeros(1, 1, 32, 32), fresh)


def test_out_of_range_input_rejected(ckpt):
    with pytest.raises(InvalidInputError):
        translate(torch.full((1, 1, 32, 32), 1.5), ckpt)


def test_translate_images_batches(ckpt):
    imgs = np.random.default_rng(0).uniform(-1, 1, (5, 32, 32)).astype(np.float32)
    whole = translate_images(imgs, ckpt)
    split = translate_images(imgs, ckpt, batch_size=2)
    assert whole.shape == (5, 32, 32)
    np.testing.assert_allclose(whole, split, atol=1e-4)  # float32 kernels vary with batch size


def test_translate_dataset(ckpt, tmp_path):
    save_dataset(generate_dataset(3, size=(32, 32)), tmp_path / "in")
    manifest, errors = translate_dataset(tmp_path / "in", ckpt, out_dir=tmp_path / "a")
    translate_dataset(tmp_path / "in", ckpt, out_dir=tmp_path / "b")
    assert errors == [] and [e["id"] for e in manifest.samples] == ["00000", "00001", "00002"]
    pngs = sorted(p.name for p in (tmp_path / "a").glob("acmt_*.png"))
    assert len(pngs) == 6
    for name in pngs:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    out = load_dataset(tmp_path / "a")
    src = load_dataset(tmp_path / "in")
    assert all(np.array_equal(a.zone_mask, b.zone_mask) for a, b in zip(out, src))
    extra = json.loads((tmp_path / "a" / "manifest.json").read_text())["extra"]
    assert "partial" not in extra


def test_translate_empty_dataset(ckpt, tmp_path):
    save_dataset([], tmp_path / "in", image_size=(32, 32))
    manifest, errors = translate_dataset(tmp_path / "in", ckpt, out_dir=tmp_path / "out")
    assert manifest.samples == [] and errors == []
