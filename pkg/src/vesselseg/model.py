"""Dual-encoder attention segmentation network.

Two 3-level encoders (raw RGB and the invariant single-channel input) meet
in an attention bottleneck fusion, pass through a connect block, and are
decoded by res-inception blocks fed through attention-gated skip fusion.
Ablation flags fall back to plain concat fusion and plain conv decoding.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import drop_block2d

from .data import ValidationError

CHECKPOINT_FORMAT = "vesselseg-ckpt-v1"


@dataclass
class ModelConfig:
    encoder_channels: tuple = (16, 32, 64)
    bottleneck_channels: int = 128
    decoder_channels: tuple = (64, 32, 16)
    dropblock_size: int = 7
    dropblock_rate: float = 0.1
    attention_reduction: int = 8
    spatial_kernel: int = 7
    raw_in_channels: int = 3
    invariant_in_channels: int = 1
    out_channels: int = 1
    # ablation switches
    use_fff: bool = True
    use_frf: bool = True
    use_resincept: bool = True

    def validate(self) -> "ModelConfig":
        if len(self.encoder_channels) != len(self.decoder_channels):
            raise ValidationError("encoder and decoder depths must match")
        if self.spatial_kernel % 2 == 0:
            raise ValidationError("spatial attention kernel must be odd")
        return self


class DropBlock(nn.Module):
    """Structured dropout; the block size shrinks (kept odd) on small maps."""

    def __init__(self, p: float, block_size: int):
        super().__init__()
        self.p = p
        self.block_size = block_size

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        size = min(self.block_size, x.shape[-2], x.shape[-1])
        if size % 2 == 0:
            size -= 1
        if size < 1:
            return x
        return drop_block2d(x, p=self.p, block_size=size, training=True)


def _conv_db_bn_relu(convs: list[nn.Module], out_ch: int, cfg: ModelConfig) -> nn.Sequential:
    return nn.Sequential(
        *convs,
        DropBlock(p=cfg.dropblock_rate, block_size=cfg.dropblock_size),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class BaseBlock(nn.Module):
    """3x3 conv -> DropBlock -> BN -> ReLU."""

    def __init__(self, in_ch, out_ch, cfg: ModelConfig):
        super().__init__()
        self.body = _conv_db_bn_relu([nn.Conv2d(in_ch, out_ch, 3, padding=1)], out_ch, cfg)

    def forward(self, x):
        return self.body(x)


class SeqIncrementalBlock(nn.Module):
    """Two stacked 3x3 convs -> DropBlock -> BN -> ReLU (wider receptive field)."""

    def __init__(self, in_ch, out_ch, cfg: ModelConfig):
        super().__init__()
        self.body = _conv_db_bn_relu(
            [nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.Conv2d(out_ch, out_ch, 3, padding=1)],
            out_ch, cfg)

    def forward(self, x):
        return self.body(x)


class StackedGeneralizationBlock(nn.Module):
    """1x1 then 3x3 conv -> DropBlock -> BN -> ReLU (channel integration)."""

    def __init__(self, in_ch, out_ch, cfg: ModelConfig):
        super().__init__()
        self.body = _conv_db_bn_relu(
            [nn.Conv2d(in_ch, out_ch, 1), nn.Conv2d(out_ch, out_ch, 3, padding=1)],
            out_ch, cfg)

    def forward(self, x):
        return self.body(x)


class ConnectBlock(nn.Module):
    """Two chained base blocks at the bottleneck width."""

    def __init__(self, channels, cfg: ModelConfig):
        super().__init__()
        self.body = nn.Sequential(BaseBlock(channels, channels, cfg),
                                  BaseBlock(channels, channels, cfg))

    def forward(self, x):
        return self.body(x)


class ResInceptionBlock(nn.Module):
    """Residual 1x1 projection added to a BaseBlock -> SGB chain."""

    def __init__(self, in_ch, out_ch, cfg: ModelConfig):
        super().__init__()
        self.project = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 1), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True))
        self.chain = nn.Sequential(BaseBlock(in_ch, out_ch, cfg),
                                   StackedGeneralizationBlock(out_ch, out_ch, cfg))

    def forward(self, x):
        return self.project(x) + self.chain(x)


class ChannelAttention(nn.Module):
    """Shared-MLP channel gate over global average- and max-pooled maps."""

    def __init__(self, channels, reduction):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, f):
        avg = self.mlp(F.adaptive_avg_pool2d(f, 1))
        mx = self.mlp(F.adaptive_max_pool2d(f, 1))
        return f * torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    """Spatial gate from channel-wise mean/max maps through a kxk conv."""

    def __init__(self, kernel):
        super().__init__()
        if kernel % 2 == 0:
            raise ValidationError("spatial attention kernel must be odd")
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2, bias=False)

    def forward(self, f):
        avg = f.mean(dim=1, keepdim=True)
        mx = f.max(dim=1, keepdim=True).values
        return f * torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class BottleneckFusion(nn.Module):
    """Concat channel-gated specific and spatially-gated invariant maps, project."""

    def __init__(self, in_ch, out_ch, cfg: ModelConfig):
        super().__init__()
        self.use_attention = cfg.use_fff
        if self.use_attention:
            self.channel_att = ChannelAttention(in_ch, cfg.attention_reduction)
            self.spatial_att = SpatialAttention(cfg.spatial_kernel)
        self.fuse = nn.Sequential(
            nn.Conv2d(2 * in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True))

    def forward(self, fx, fy):
        if fx.shape != fy.shape:
            raise ValidationError(f"fusion inputs differ in shape: {tuple(fx.shape)} vs {tuple(fy.shape)}")
        if self.use_attention:
            fx = self.channel_att(fx)
            fy = self.spatial_att(fy)
        return self.fuse(torch.cat([fx, fy], dim=1))


class SkipFusion(nn.Module):
    """Attention-gated replacement for a skip connection.

    Low-level maps from both encoders are fused through parallel dilated and
    plain conv paths; the upsampled coarser decoder map gates the fused
    features before the final 1x1 merge.
    """

    def __init__(self, enc_ch, dec_in_ch, out_ch):
        super().__init__()
        cat = 2 * enc_ch
        self.dilated_path = nn.Sequential(
            nn.Conv2d(cat, out_ch, 1),
            nn.Conv2d(out_ch, out_ch, 3, padding=2, dilation=2))
        self.local_path = nn.Sequential(
            nn.Conv2d(cat, out_ch, 1),
            nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.refine = nn.Sequential(
            nn.Conv2d(out_ch, out_ch, 1), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True))
        self.project_high = nn.Conv2d(dec_in_ch, out_ch, 1)
        self.att_pre = nn.Conv2d(out_ch, out_ch, 1)
        self.att_post = nn.Conv2d(out_ch, out_ch, 1)
        self.merge = nn.Conv2d(2 * out_ch, out_ch, 1)

    def forward(self, lx, ly, hx):
        if lx.shape != ly.shape:
            raise ValidationError(f"skip inputs differ in shape: {tuple(lx.shape)} vs {tuple(ly.shape)}")
        if (hx.shape[-2] * 2, hx.shape[-1] * 2) != (lx.shape[-2], lx.shape[-1]):
            raise ValidationError(
                f"decoder map {tuple(hx.shape[-2:])} must be exactly half of skip {tuple(lx.shape[-2:])}")
        cat = torch.cat([lx, ly], dim=1)
        fused = self.refine(self.dilated_path(cat) + self.local_path(cat))
        high = self.project_high(
            F.interpolate(hx, scale_factor=2, mode="bilinear", align_corners=False))
        weights = torch.sigmoid(self.att_post(F.relu(self.att_pre(high) + fused)))
        return self.merge(torch.cat([high, weights * fused], dim=1))


class DualEncoderNet(nn.Module):
    """Full segmentation network; inputs are (B,3,H,W) raw and (B,1,H,W) invariant."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = (cfg or ModelConfig()).validate()
        cfg = self.cfg
        enc = cfg.encoder_channels
        dec = cfg.decoder_channels

        def stages(in_ch, second_block):
            blocks = nn.ModuleList()
            prev = in_ch
            for ch in enc:
                blocks.append(nn.Sequential(BaseBlock(prev, ch, cfg), second_block(ch, ch, cfg)))
                prev = ch
            return blocks

        self.encoder_specific = stages(cfg.raw_in_channels, SeqIncrementalBlock)
        self.encoder_invariant = stages(cfg.invariant_in_channels, StackedGeneralizationBlock)
        self.pool = nn.MaxPool2d(2)
        self.fusion = BottleneckFusion(enc[-1], cfg.bottleneck_channels, cfg)
        self.connect = ConnectBlock(cfg.bottleneck_channels, cfg)

        dec_block = ResInceptionBlock if cfg.use_resincept else BaseBlock
        high_chs = [cfg.bottleneck_channels] + list(dec[:-1])
        self.skips = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in range(len(enc)):
            e = enc[-1 - level]
            d = dec[level]
            h = high_chs[level]
            if cfg.use_frf:
                self.skips.append(SkipFusion(e, h, d))
                self.decoder.append(dec_block(d, d, cfg))
            else:
                self.skips.append(None)
                self.decoder.append(dec_block(h + 2 * e, d, cfg))
        self.head = nn.Conv2d(dec[-1], cfg.out_channels, 1)

    def forward(self, raw: torch.Tensor, invariant: torch.Tensor) -> torch.Tensor:
        if raw.shape[-2:] != invariant.shape[-2:]:
            raise ValidationError(
                f"raw {tuple(raw.shape[-2:])} and invariant {tuple(invariant.shape[-2:])} dims differ")
        h, w = raw.shape[-2:]
        if h % 8 or w % 8:
            raise ValidationError(f"input size {h}x{w} must be divisible by 8")

        x, y = raw, invariant
        skips_x, skips_y = [], []
        for sx, sy in zip(self.encoder_specific, self.encoder_invariant):
            x = sx(x)
            y = sy(y)
            skips_x.append(x)
            skips_y.append(y)
            x = self.pool(x)
            y = self.pool(y)

        out = self.connect(self.fusion(x, y))
        for level, (skip, block) in enumerate(zip(self.skips, self.decoder)):
            lx = skips_x[-1 - level]
            ly = skips_y[-1 - level]
            if skip is not None:
                out = block(skip(lx, ly, out))
            else:
                up = F.interpolate(out, scale_factor=2, mode="bilinear", align_corners=False)
                out = block(torch.cat([up, lx, ly], dim=1))
        return torch.sigmoid(self.head(out))


def parameter_payload_mb(model: nn.Module) -> float:
    """Size of the learned parameters in megabytes."""
    return sum(p.numel() * p.element_size() for p in model.parameters()) / 2**20


def save_checkpoint(path, model: DualEncoderNet, manifest: dict | None = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "manifest": manifest or {},
    }, str(path))


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[DualEncoderNet, dict]:
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unknown checkpoint format in {path}: {blob.get('format')!r}")
    stored = blob["config"]
    stored["encoder_channels"] = tuple(stored["encoder_channels"])
    stored["decoder_channels"] = tuple(stored["decoder_channels"])
    if cfg is not None and asdict(cfg) != stored:
        raise ValidationError("checkpoint model config does not match the requested config")
    model = DualEncoderNet(ModelConfig(**stored))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("manifest", {})
