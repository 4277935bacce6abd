import json
import os
import subprocess
import sys

import numpy as np
import pytest

from acmt.cli import main
from acmt.phantom import load_dataset, save_dataset, generate_dataset, write_field, write_image, write_mask

SMALL_CONFIG = """\
seed: 1
network:
  levels: 3
  base_channels: 8
  time_embed_dim: 16
train:
  epochs: 1
  batch_size: 4
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(root / "data"), "--count", "8", "--size", "32", "--seed", "5"]) == 0
    (root / "small.yaml").write_text(SMALL_CONFIG)
    assert main(["train", "--data", str(root / "data"), "--config", str(root / "small.yaml"),
                 "--out", str(root / "run")]) == 0
    return root


def test_gen_accounting_and_determinism(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--out", str(tmp_path / name), "--count", "3", "--size", "32", "--seed", "2"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 3 * 6 + 1
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    extra = json.loads((tmp_path / "a" / "manifest.json").read_text())["extra"]
    assert extra["generator"] == {"count": 3, "size": [32, 32], "seed": 2, "max_displacement": 5.0}


def test_gen_empty(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--count", "0"]) == 0
    assert load_dataset(tmp_path) == []


def test_gen_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen", "--out", str(blocker / "sub"), "--count", "1"]) == 2


def test_train_outputs(workdir):
    run = workdir / "run"
    lines = (run / "train_log.ndjson").read_text().splitlines()
    meta = json.loads((run / "checkpoint" / "meta.json").read_text())
    assert len(lines) == meta["step"] == 2
    effective = json.loads((run / "config.effective.json").read_text())
    assert effective["network"]["image_size"] == [32, 32]
    assert effective["train"]["epochs"] == 1 and effective["seed"] == 1


def test_train_rerun_identical(workdir, tmp_path):
    assert main(["train", "--data", str(workdir / "data"), "--config", str(workdir / "small.yaml"),
                 "--out", str(tmp_path / "again")]) == 0
    a = [json.loads(l)["total"] for l in (workdir / "run" / "train_log.ndjson").read_text().splitlines()]
    b = [json.loads(l)["total"] for l in (tmp_path / "again" / "train_log.ndjson").read_text().splitlines()]
    assert a == b


def test_train_flag_overrides_file(workdir, tmp_path):
    assert main(["train", "--data", str(workdir / "data"), "--config", str(workdir / "small.yaml"),
                 "--out", str(tmp_path / "o"), "--seed", "9", "--epochs", "2"]) == 0
    effective = json.loads((tmp_path / "o" / "config.effective.json").read_text())
    assert effective["seed"] == 9 and effective["train"]["epochs"] == 2


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_train_bad_config_lists_keys(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("bridge:\n  sigmaa: 0.1\ntrain:\n  epochz: 3\n")
    assert main(["train", "--data", str(workdir / "data"), "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == 2
    assert "bridge.sigmaa" in capsys.readouterr().err


def test_train_invalid_value(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  batch_size: 2\n")
    assert main(["train", "--data", str(workdir / "data"), "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == 2


def test_train_numeric_failure_exit_3(workdir, tmp_path, monkeypatch, capsys):
    import acmt.trainer as trainer_mod

    real = trainer_mod.sb_loss
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        value = real(*args, **kw)
        return value * float("inf") if calls["n"] > 4 else value

    monkeypatch.setattr(trainer_mod, "sb_loss", flaky)
    cfg = tmp_path / "c.yaml"
    cfg.write_text(SMALL_CONFIG.replace("epochs: 1", "epochs: 3"))
    assert main(["train", "--data", str(workdir / "data"), "--config", str(cfg),
                 "--out", str(tmp_path / "o")]) == 3
    assert str(tmp_path / "o" / "checkpoint") in capsys.readouterr().err


def test_translate_accounting_and_determinism(workdir, tmp_path):
    for name in ("a", "b"):
        assert main(["translate", "--ckpt", str(workdir / "run"), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / name)]) == 0
    pngs = sorted(p.name for p in (tmp_path / "a").glob("acmt_*.png"))
    assert len(pngs) == 2 * 8
    for name in pngs:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "config.effective.json").is_file()


def test_translate_single_step(workdir, tmp_path):
    import torch
    from acmt.checkpoint import load_checkpoint
    from acmt.phantom import encode_image

    assert main(["translate", "--ckpt", str(workdir / "run" / "checkpoint"), "--data",
                 str(workdir / "data"), "--out", str(tmp_path / "t"), "--nfe", "1"]) == 0
    net = load_checkpoint(workdir / "run" / "checkpoint").build_network()
    src = load_dataset(workdir / "data")[0]
    direct = net(torch.from_numpy(src.mr)[None, None], 0.0)[0][0, 0].detach().numpy()
    from PIL import Image
    with Image.open(tmp_path / "t" / "acmt_mr_00000.png") as im:
        got = np.array(im)
    assert np.abs(got.astype(int) - encode_image(direct).astype(int)).max() <= 1


def test_translate_bad_nfe(workdir, tmp_path):
    assert main(["translate", "--ckpt", str(workdir / "run"), "--data", str(workdir / "data"),
                 "--out", str(tmp_path / "t"), "--nfe", "9"]) == 2


def test_translate_missing_checkpoint(workdir, tmp_path):
    assert main(["translate", "--ckpt", str(tmp_path / "none"), "--data", str(workdir / "data"),
                 "--out", str(tmp_path / "t")]) == 2


def test_register_single_and_batch(workdir, tmp_path):
    s = load_dataset(workdir / "data")[0]
    write_image(tmp_path / "f.png", s.us)
    write_image(tmp_path / "m.png", s.mr)
    assert main(["register", "--fixed", str(tmp_path / "f.png"), "--moving", str(tmp_path / "m.png"),
                 "--out", str(tmp_path / "u.bin")]) == 0
    assert (tmp_path / "u.json").is_file()
    assert main(["register", "--data", str(workdir / "data"), "--out", str(tmp_path / "fields")]) == 0
    assert len(list((tmp_path / "fields").glob("field_*.bin"))) == 8
    assert main(["eval", "--mode", "registration", "--data", str(workdir / "data"),
                 "--fields", str(tmp_path / "fields"), "--out", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["n_pairs"] == 8 and 0 <= report["dsc"] <= 1 and report["asd_px"] >= 0


def test_register_shape_mismatch(tmp_path):
    write_image(tmp_path / "f.png", np.zeros((32, 32)))
    write_image(tmp_path / "m.png", np.zeros((32, 40)))
    assert main(["register", "--fixed", str(tmp_path / "f.png"), "--moving", str(tmp_path / "m.png"),
                 "--out", str(tmp_path / "u.bin")]) == 2


def test_eval_translation_identical_dirs(workdir, tmp_path):
    d = str(workdir / "data")
    assert main(["eval", "--mode", "translation", "--data", d, "--against", d,
                 "--out", str(tmp_path / "t.json")]) == 0
    report = json.loads((tmp_path / "t.json").read_text())
    assert report["fid_proxy"] == pytest.approx(0, abs=1e-6)
    assert abs(report["kid_proxy"]) <= 3 * report["kid_proxy_stderr"]
    assert main(["eval", "--mode", "translation", "--data", d, "--out", str(tmp_path / "mu.json")]) == 0
    assert json.loads((tmp_path / "mu.json").read_text())["fid_proxy"] > 0


def test_eval_registration_zero_field(tmp_path):
    m = np.zeros((16, 16), np.uint8)
    m[4:10, 5:12] = 1
    write_mask(tmp_path / "a.png", m)
    write_mask(tmp_path / "b.png", m)
    write_field(tmp_path / "z.bin", np.zeros((2, 16, 16)))
    assert main(["eval", "--mode", "registration", "--field", str(tmp_path / "z.bin"),
                 "--moving-mask", str(tmp_path / "a.png"), "--fixed-mask", str(tmp_path / "b.png"),
                 "--out", str(tmp_path / "r.json")]) == 0
    r = json.loads((tmp_path / "r.json").read_text())
    assert (r["dsc"], r["iou"], r["asd_px"]) == (1.0, 1.0, 0.0)
    write_mask(tmp_path / "c.png", np.zeros((8, 8)))
    assert main(["eval", "--mode", "registration", "--field", str(tmp_path / "z.bin"),
                 "--moving-mask", str(tmp_path / "a.png"), "--fixed-mask", str(tmp_path / "c.png"),
                 "--out", str(tmp_path / "r.json")]) == 2


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["gen"])
    assert info.value.code == 2
    env = {**os.environ, "ACMT_LOG_LEVEL": "loud"}
    proc = subprocess.run([sys.executable, "-m", "acmt", "gen", "--out", str(tmp_path), "--count", "0"],
                          env=env, capture_output=True, text=True)
    assert proc.returncode == 2 and "ACMT_LOG_LEVEL" in proc.stderr


def test_module_entry_point(tmp_path):
    env = {**os.environ, "ACMT_LOG_LEVEL": "error"}
    proc = subprocess.run([sys.executable, "-m", "acmt", "gen", "--out", str(tmp_path), "--count", "1",
                           "--size", "32"], env=env, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stderr == ""
