"""BCE, soft Dice and their weighted blend."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .data import ValidationError


@dataclass
class LossConfig:
    alpha: float = 0.25
    smooth: float = 1.0
    prob_clamp: float = 1e-7

    def validate(self) -> "LossConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.smooth <= 0:
            raise ValidationError("smooth must be positive")
        return self


def _check(pr: torch.Tensor, gt: torch.Tensor) -> None:
    if pr.shape != gt.shape:
        raise ValidationError(f"prediction shape {tuple(pr.shape)} != target {tuple(gt.shape)}")


def bce_loss(pr: torch.Tensor, gt: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    _check(pr, gt)
    p = pr.clamp(cfg.prob_clamp, 1.0 - cfg.prob_clamp)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p)).mean()


def dice_loss(pr: torch.Tensor, gt: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    _check(pr, gt)
    inter = (pr * gt).sum()
    return 1.0 - (2.0 * inter + cfg.smooth) / (pr.sum() + gt.sum() + cfg.smooth)


def combined_loss(pr: torch.Tensor, gt: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    cfg.validate()
    return cfg.alpha * bce_loss(pr, gt, cfg) + (1.0 - cfg.alpha) * dice_loss(pr, gt, cfg)
