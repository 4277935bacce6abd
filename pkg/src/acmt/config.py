"""Typed configuration, strict dict/YAML loading and seed derivation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .bridge import BridgeConfig
from .errors import InvalidInputError
from .network import NetworkConfig
from .objectives import LossWeights
from .registration import RegistrationConfig

__all__ = [
    "TrainConfig", "RunConfig", "ConfigError", "derive_seed", "config_hash",
    "load_run_config", "to_plain",
]


class ConfigError(InvalidInputError):
    """Invalid configuration; ``keys`` lists the offending entries."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)


def derive_seed(root, name):
    """Deterministic per-subsystem seed split from one root seed."""
    ss = np.random.SeedSequence(int(root), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch_size: int = 8
    learning_rate: float = 2e-4
    seed: int = 0
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.bridge.sigma > 0 and self.batch_size < 4:
            raise InvalidInputError("batch_size must be >= 4 when sigma > 0 (entropy term)")
        # lr = 0 is accepted as a degenerate "frozen" optimiser
        if not self.learning_rate >= 0:
            raise InvalidInputError("learning_rate must be >= 0")

    @property
    def min_batch(self):
        return 4 if self.bridge.sigma > 0 else 1


def to_plain(obj):
    """Dataclass tree -> JSON-compatible dict."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    return obj


def config_hash(*configs):
    blob = json.dumps([to_plain(c) for c in configs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


_TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "augment")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    train: dict = field(default_factory=dict)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    paths: dict = field(default_factory=dict)

    def train_config(self):
        return TrainConfig(seed=self.seed, bridge=self.bridge, weights=self.weights,
                           network=self.network, **self.train)

    def to_dict(self):
        d = to_plain(self)
        d["train"] = {k: getattr(self.train_config(), k) for k in _TRAIN_KEYS}
        return d


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping", [prefix])
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        keys = [f"{prefix}.{k}" if prefix else k for k in unknown]
        raise ConfigError(f"unknown config keys: {', '.join(keys)}", keys)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix or 'config'}: {exc}", [prefix]) from exc


def run_config_from_dict(data):
    """Strictly build a :class:`RunConfig`; missing keys take defaults."""
    data = dict(data or {})
    sections = {"bridge": BridgeConfig, "network": NetworkConfig, "weights": LossWeights,
                "registration": RegistrationConfig}
    top_unknown = sorted(set(data) - {"seed", "train", "paths", *sections})
    if top_unknown:
        raise ConfigError(f"unknown config keys: {', '.join(top_unknown)}", top_unknown)
    kwargs = {name: _build(cls, data[name], name) for name, cls in sections.items() if name in data}
    train = data.get("train", {}) or {}
    bad = sorted(set(train) - set(_TRAIN_KEYS))
    if bad:
        raise ConfigError(f"unknown config keys: {', '.join('train.' + k for k in bad)}",
                          ["train." + k for k in bad])
    try:
        cfg = RunConfig(seed=int(data.get("seed", 0)), train=dict(train),
                        paths=dict(data.get("paths", {}) or {}), **kwargs)
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config: {exc}", ["train"]) from exc
    return cfg


def load_run_config(path=None, overrides=None):
    """Read a YAML/JSON config file (or defaults) and apply flag overrides.

    ``overrides`` maps dotted keys (``"train.epochs"``) to values; they win
    over file values.
    """
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", [str(path)]) from exc
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return run_config_from_dict(data)
