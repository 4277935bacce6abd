"""Training loop: synthesise bridge states with the frozen network, then learn
to map them to the terminal modality under the combined loss."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bridge import diffusion_step, pool_sample
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig, derive_seed
from .errors import InvalidInputError, NonFiniteLossError, TrainingAborted
from .network import TranslatorNet, parameter_fingerprint
from .objectives import (LossHeads, LossReport, boundary_loss, random_projection, sb_loss,
                         texture_loss, total_loss)
from .phantom import AUGMENT_OPS, augment_pair

logger = logging.getLogger(__name__)

__all__ = ["Trainer", "TrainLog", "synthesize_state", "fit", "to_tensor"]

PROJECTION_DIM = 64


def to_tensor(images):
    """Stack 2D arrays into a float32 ``(B, 1, H, W)`` tensor."""
    return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float32) for a in images]))[:, None]


def synthesize_state(x0, i, net, bridge, generator=None):
    """Run the bridge from ``t_0`` to pool time ``t_i`` with a frozen predictor.

    ``net`` is a :class:`TranslatorNet` (queried in eval mode without
    gradients) or any callable ``(x, t) -> x1``.
    """
    pool = bridge.timestep_pool
    if not 0 <= i < len(pool):
        raise InvalidInputError(f"pool index {i} out of range for {len(pool)} entries")
    predict = net.predict if isinstance(net, TranslatorNet) else net
    x = x0
    with torch.no_grad():
        for j in range(i):
            x1 = predict(x, pool[j])
            x = diffusion_step(x, x1, pool[j], pool[j + 1], bridge.sigma, generator)
    return x


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    fingerprints: list = field(default_factory=list)
    wall_clock: float = 0.0

    def totals(self):
        return [r["total"] for r in self.records]


class Trainer:
    """Owns the network, frozen loss heads, optimiser and random stream."""

    def __init__(self, config=None, checkpoint=None):
        self.config = config = config or TrainConfig()
        seed = config.seed
        self.net = TranslatorNet(config.network)
        if checkpoint is None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(derive_seed(seed, "network"))
                self.net = TranslatorNet(config.network)
        else:
            self.net.load_state_dict(checkpoint.state_dict)
        self.heads = LossHeads.for_network(config.network, seed=derive_seed(seed, "heads"))
        H, W = config.network.image_size
        self.projection = random_projection(2 * H * W, PROJECTION_DIM,
                                            seed=derive_seed(seed, "projection"))
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=config.learning_rate)
        self.generator = torch.Generator().manual_seed(derive_seed(seed, "train"))
        self.epoch = 0
        self.step = 0
        if checkpoint is not None:
            self.epoch, self.step = checkpoint.epoch, checkpoint.step
            if checkpoint.trainer_state is not None:
                self.optimizer.load_state_dict(checkpoint.trainer_state["optimizer"])
                self.generator.set_state(checkpoint.trainer_state["generator"])

    def checkpoint(self):
        return Checkpoint(
            network=self.config.network,
            bridge=self.config.bridge,
            loss_weights=self.config.weights,
            state_dict={k: v.detach().clone() for k, v in self.net.state_dict().items()},
            epoch=self.epoch,
            step=self.step,
            seed=self.config.seed,
            trainer_state={"optimizer": self.optimizer.state_dict(),
                           "generator": self.generator.get_state()},
        )

    def compute_losses(self, x0_mr, x0_us, t_i, x_ti_mr, x_ti_us):
        """Forward both modalities in train mode and evaluate every loss term."""
        cfg = self.config
        B = x0_mr.shape[0]
        self.net.train()
        x1, _ = self.net(torch.cat([x_ti_mr, x_ti_us]), t_i)
        x1_mr, x1_us = x1[:B], x1[B:]
        # feature passes use fixed conditioning time 0; weights act as constants there
        f1 = self.net.extract_features(x1, 0.0, detach_params=True)
        with torch.no_grad():
            f0 = self.net.extract_features(torch.cat([x0_mr, x0_us]), 0.0)
        terms = dict(
            texture=texture_loss(f1.shallow[:B], f1.shallow[B:], self.heads),
            boundary_mr=boundary_loss(f1.deep[:B], f0.deep[:B], self.heads),
            boundary_us=boundary_loss(f1.deep[B:], f0.deep[B:], self.heads),
            sb_mr=sb_loss(x_ti_mr, x1_mr, t_i, cfg.bridge.sigma, self.projection),
            sb_us=sb_loss(x_ti_us, x1_us, t_i, cfg.bridge.sigma, self.projection),
        )
        total = total_loss(weights=cfg.weights, **terms)
        return total, terms

    def train_step(self, batch):
        """One optimisation step on a batch of paired samples."""
        cfg = self.config
        if len(batch) < cfg.min_batch:
            raise InvalidInputError(f"batch of {len(batch)} below the minimum {cfg.min_batch}")
        x0_mr = to_tensor([s.mr for s in batch])
        x0_us = to_tensor([s.us for s in batch])
        if x0_mr.shape != x0_us.shape:
            raise InvalidInputError("MR and US images must share a shape")

        i, t_i = pool_sample(cfg.bridge.timestep_pool, self.generator)
        x_ti = synthesize_state(torch.cat([x0_mr, x0_us]), i, self.net, cfg.bridge,
                                self.generator)
        B = len(batch)
        self.optimizer.zero_grad(set_to_none=True)
        try:
            total, terms = self.compute_losses(x0_mr, x0_us, t_i, x_ti[:B], x_ti[B:])
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"step {self.step + 1}: {exc}", exc.components) from exc
        total.backward()
        self.optimizer.step()
        self.step += 1
        values = {k: float(v.detach()) for k, v in terms.items()}
        report = LossReport(total=float(total.detach()), **values)
        report.t_i = t_i
        return report

    def epoch_batches(self, dataset):
        """Shuffled (and optionally augmented) batches for one epoch."""
        cfg = self.config
        order = torch.randperm(len(dataset), generator=self.generator).tolist()
        samples = [dataset[k] for k in order]
        if cfg.augment:
            ops = torch.randint(len(AUGMENT_OPS) + 1, (len(samples),),
                                generator=self.generator).tolist()
            samples = [s if op == 0 else augment_pair(s, AUGMENT_OPS[op - 1])
                       for s, op in zip(samples, ops)]
        batches = [samples[k:k + cfg.batch_size] for k in range(0, len(samples), cfg.batch_size)]
        if batches and len(batches[-1]) < cfg.min_batch:
            batches.pop()
        return batches


def _log_record(trainer, report):
    d = report.to_dict()
    return {"step": trainer.step, "epoch": trainer.epoch + 1, "t_i": report.t_i,
            "texture": d["texture"], "boundary": d["boundary"], "sb": d["sb"],
            "total": d["total"], "boundary_mr": d["boundary_mr"],
            "boundary_us": d["boundary_us"], "sb_mr": d["sb_mr"], "sb_us": d["sb_us"]}


def fit(dataset, config=None, out_dir=None, resume=None, epochs=None, progress=None):
    """Train on ``dataset`` (a list of :class:`PairedSample`).

    Writes ``out_dir/checkpoint`` after every epoch and appends one JSON line
    per step to ``out_dir/train_log.ndjson``. ``resume`` is a
    :class:`Checkpoint` carrying trainer state; training continues with the
    same random stream. ``epochs`` optionally stops earlier than
    ``config.epochs``. Returns ``(Checkpoint, TrainLog)``.
    """
    config = config or TrainConfig()
    dataset = list(dataset)
    if not dataset:
        raise InvalidInputError("cannot train on an empty dataset")
    if len(dataset) < config.min_batch:
        raise InvalidInputError(f"dataset smaller than the minimum batch {config.min_batch}")
    trainer = Trainer(config, checkpoint=resume)
    log = TrainLog()
    start = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.ndjson", "a" if resume is not None else "w")
    last_good = None
    stop = min(config.epochs, epochs) if epochs is not None else config.epochs
    logger.info("training %d parameters on %d pairs", trainer.net.parameter_count(), len(dataset))
    try:
        while trainer.epoch < stop:
            for batch in trainer.epoch_batches(dataset):
                try:
                    report = trainer.train_step(batch)
                except NonFiniteLossError as exc:
                    raise TrainingAborted(str(exc), last_good, exc.components) from exc
                record = _log_record(trainer, report)
                log.records.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if progress is not None:
                    progress(record)
            trainer.epoch += 1
            log.fingerprints.append(parameter_fingerprint(trainer.net))
            recent = log.totals()[-10:]
            logger.info("epoch %d/%d: mean total %.5f", trainer.epoch, stop,
                        sum(recent) / max(len(recent), 1))
            if out_dir is not None:
                last_good = save_checkpoint(trainer.checkpoint(), out_dir / "checkpoint")
    finally:
        if log_file is not None:
            log_file.close()
    log.wall_clock = time.perf_counter() - start
    return trainer.checkpoint(), log
