"""Seeded training loop: Adam, constant learning rate, combined BCE+Dice loss."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import AugmentConfig, ChannelStats, augment_sample
from .data import FundusSample, ValidationError, check_divisible_by_8
from .invariant import InvariantConfig, make_invariant_input
from .losses import LossConfig, combined_loss
from .model import DualEncoderNet, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.0005
    epochs: int = 220
    batch_size: int = 2
    seed: int = 0
    image_size: tuple[int, int] = (128, 128)
    checkpoint_every: int = 50
    val_fraction: float = 0.0
    augment_online: bool = False

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValidationError("learning_rate and batch_size must be positive, epochs >= 0")
        check_divisible_by_8(*self.image_size)
        return self


def _to_tensors(sample: FundusSample, icfg: InvariantConfig):
    raw = torch.from_numpy(sample.image.transpose(2, 0, 1).copy()).float()
    inv = torch.from_numpy(make_invariant_input(sample, icfg)[None, :, :].copy()).float()
    gt = torch.from_numpy(sample.vessel_mask[None, :, :].copy()).float()
    return raw, inv, gt


def train(model: DualEncoderNet, dataset: list[FundusSample],
          stats: ChannelStats | None, tcfg: TrainConfig, lcfg: LossConfig,
          icfg: InvariantConfig, out_dir=None,
          max_steps: int | None = None) -> list[dict]:
    """Optimize the model in place; returns the per-epoch history."""
    tcfg.validate()
    lcfg.validate()
    if not dataset:
        raise ValidationError("training dataset is empty")
    for s in dataset:
        if s.image.shape[:2] != tcfg.image_size:
            raise ValidationError(
                f"sample {s.id} is {s.image.shape[:2]}, expected {tcfg.image_size}; resize first")

    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    n_val = int(round(tcfg.val_fraction * len(dataset)))
    order = rng.permutation(len(dataset))
    val_set = [dataset[i] for i in order[:n_val]]
    train_set = [dataset[i] for i in order[n_val:]]
    if not train_set:
        raise ValidationError("validation split leaves no training samples")

    cache = None
    if not (tcfg.augment_online and stats is not None):
        cache = [_to_tensors(s, icfg) for s in train_set]
    val_cache = [_to_tensors(s, icfg) for s in val_set]

    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.learning_rate,
                                 weight_decay=tcfg.weight_decay)
    history: list[dict] = []
    step = 0
    start = time.time()
    for epoch in range(tcfg.epochs):
        if tcfg.augment_online and stats is not None:
            epoch_data = []
            for i, s in enumerate(train_set):
                cfg = AugmentConfig(seed=tcfg.seed + epoch * len(train_set) + i)
                epoch_data.append(_to_tensors(augment_sample(s, stats, cfg), icfg))
        else:
            epoch_data = cache

        model.train()
        perm = rng.permutation(len(epoch_data))
        losses = []
        for b0 in range(0, len(perm), tcfg.batch_size):
            idx = perm[b0:b0 + tcfg.batch_size]
            raw = torch.stack([epoch_data[i][0] for i in idx])
            inv = torch.stack([epoch_data[i][1] for i in idx])
            gt = torch.stack([epoch_data[i][2] for i in idx])
            optimizer.zero_grad()
            loss = combined_loss(model(raw, inv), gt, lcfg)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            step += 1
            if max_steps is not None and step >= max_steps:
                break

        record = {"epoch": epoch, "loss": float(np.mean(losses)),
                  "lr": tcfg.learning_rate, "wall_time": time.time() - start}
        if val_cache:
            model.eval()
            with torch.no_grad():
                vlosses = [float(combined_loss(model(raw[None], inv[None]), gt[None], lcfg))
                           for raw, inv, gt in val_cache]
            record["val_loss"] = float(np.mean(vlosses))
        history.append(record)
        log.info("epoch %d: loss %.4f", epoch, record["loss"])

        if out_dir is not None and tcfg.checkpoint_every > 0 \
                and (epoch + 1) % tcfg.checkpoint_every == 0:
            save_checkpoint(f"{out_dir}/epoch{epoch + 1:04d}.ckpt", model,
                            {"epoch": epoch + 1, "history": history})
        if max_steps is not None and step >= max_steps:
            break
    model.eval()
    return history
