"""Checkpoint directories: ``weights.pt`` + ``meta.json`` (+ ``trainer_state.pt``)."""
from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import torch

from . import __version__
from .bridge import BridgeConfig
from .config import config_hash, to_plain
from .errors import CorruptCheckpointError
from .network import NetworkConfig, TranslatorNet
from .objectives import LossWeights

FORMAT_VERSION = "1.0"
WEIGHTS = "weights.pt"
META = "meta.json"
TRAINER_STATE = "trainer_state.pt"


@dataclass
class Checkpoint:
    network: NetworkConfig
    bridge: BridgeConfig
    loss_weights: LossWeights
    state_dict: dict
    epoch: int = 0
    step: int = 0
    seed: int = 0
    trainer_state: dict | None = None

    @property
    def config_hash(self):
        return config_hash(self.network, self.bridge, self.loss_weights)

    def build_network(self):
        net = TranslatorNet(self.network)
        net.load_state_dict(self.state_dict)
        net.eval()
        return net

    def meta(self):
        return {
            "format_version": FORMAT_VERSION,
            "package_version": __version__,
            "network": to_plain(self.network),
            "bridge": to_plain(self.bridge),
            "loss_weights": to_plain(self.loss_weights),
            "epoch": self.epoch,
            "step": self.step,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }


def _to_bytes(obj):
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def _atomic_write(path, data):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = ckpt.meta()
    weights = _to_bytes(ckpt.state_dict)
    meta["weights_sha256"] = hashlib.sha256(weights).hexdigest()
    _atomic_write(path / WEIGHTS, weights)
    if ckpt.trainer_state is not None:
        state = _to_bytes(ckpt.trainer_state)
        meta["trainer_state_sha256"] = hashlib.sha256(state).hexdigest()
        _atomic_write(path / TRAINER_STATE, state)
    _atomic_write(path / META, json.dumps(meta, indent=1).encode())
    return path


def _load_blob(path, expected_sha):
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read {path}: {exc}") from exc
    if hashlib.sha256(data).hexdigest() != expected_sha:
        raise CorruptCheckpointError(f"hash mismatch for {path}")
    try:
        return torch.load(io.BytesIO(data), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CorruptCheckpointError(f"cannot decode {path}: {exc}") from exc


def load_checkpoint(path):
    path = Path(path)
    try:
        meta = json.loads((path / META).read_text())
        version = str(meta["format_version"])
        network = NetworkConfig(**meta["network"])
        bridge = BridgeConfig(**meta["bridge"])
        weights = LossWeights(**meta["loss_weights"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"bad checkpoint metadata in {path}: {exc}") from exc
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    ckpt = Checkpoint(network, bridge, weights, state_dict={}, epoch=int(meta["epoch"]),
                      step=int(meta.get("step", 0)), seed=int(meta["seed"]))
    if ckpt.config_hash != meta.get("config_hash"):
        raise CorruptCheckpointError("config hash does not match the stored configs")
    ckpt.state_dict = _load_blob(path / WEIGHTS, meta.get("weights_sha256"))
    if "trainer_state_sha256" in meta:
        ckpt.trainer_state = _load_blob(path / TRAINER_STATE, meta["trainer_state_sha256"])
    try:
        ckpt.build_network()
    except (RuntimeError, KeyError) as exc:
        raise CorruptCheckpointError(f"weights do not fit the network config: {exc}") from exc
    return ckpt
