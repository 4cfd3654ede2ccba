"""Color-statistics augmentation guided by a reference dataset.

Per-channel mean/std of a reference image collection drive a
standardize-and-blend transform; a common random rotation is then applied
to the image and both masks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import rotate as nd_rotate

from .data import FundusSample, ValidationError

SIGMA_FLOOR = 1e-6


@dataclass
class ChannelStats:
    mean: np.ndarray          # (3,) per-channel mean, RGB
    std: np.ndarray           # (3,) per-channel population std
    pixel_count: int
    image_count: int
    reference_name: str = ""

    def to_json(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps({
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "pixel_count": self.pixel_count,
            "image_count": self.image_count,
            "reference_name": self.reference_name,
        }, indent=2))

    @classmethod
    def from_json(cls, path) -> "ChannelStats":
        d = json.loads(Path(path).read_text())
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64),
                   pixel_count=int(d["pixel_count"]),
                   image_count=int(d["image_count"]),
                   reference_name=d.get("reference_name", ""))


@dataclass
class AugmentConfig:
    alpha_range: tuple[float, float] = (0.7, 1.0)
    rotation_degrees: tuple[float, float] = (-15.0, 15.0)
    seed: int = 0

    def validate(self) -> "AugmentConfig":
        lo, hi = self.alpha_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValidationError(f"alpha_range {self.alpha_range} must be within [0, 1]")
        if self.rotation_degrees[0] > self.rotation_degrees[1]:
            raise ValidationError("rotation_degrees interval is inverted")
        return self


def reference_stats(images: list[np.ndarray], reference_name: str = "") -> ChannelStats:
    """Global per-channel population mean/std over a list of RGB images."""
    if not images:
        raise ValidationError("reference image list is empty")
    # two-pass over flattened channels; images may differ in resolution
    pixel_count = sum(im.shape[0] * im.shape[1] for im in images)
    total = np.zeros(3, dtype=np.float64)
    for im in images:
        total += im.reshape(-1, 3).sum(axis=0, dtype=np.float64)
    mean = total / pixel_count
    sq = np.zeros(3, dtype=np.float64)
    for im in images:
        sq += ((im.reshape(-1, 3).astype(np.float64) - mean) ** 2).sum(axis=0)
    std = np.sqrt(sq / pixel_count)
    return ChannelStats(mean=mean, std=std, pixel_count=pixel_count,
                        image_count=len(images), reference_name=reference_name)


def csa_transform(image: np.ndarray, stats: ChannelStats, alpha: float) -> np.ndarray:
    """Blend the channel-standardized image with the original, then clip."""
    sigma = np.maximum(stats.std, SIGMA_FLOOR)
    img = image.astype(np.float64)
    out = alpha * (img - stats.mean) / sigma + (1.0 - alpha) * img
    return np.clip(out, 0.0, 1.0)


def rotate_sample(sample: FundusSample, angle: float) -> FundusSample:
    """Rotate image (bilinear) and masks (nearest) about the center, zero fill."""
    if angle == 0.0:
        return sample
    image = np.clip(
        nd_rotate(sample.image, angle, axes=(1, 0), reshape=False, order=1,
                  mode="constant", cval=0.0), 0.0, 1.0).astype(np.float32)
    vessel = nd_rotate(sample.vessel_mask, angle, axes=(1, 0), reshape=False,
                       order=0, mode="constant", cval=0)
    fov = nd_rotate(sample.fov_mask, angle, axes=(1, 0), reshape=False,
                    order=0, mode="constant", cval=0)
    return replace(sample, image=image, vessel_mask=vessel, fov_mask=fov)


def augment_sample(sample: FundusSample, stats: ChannelStats,
                   cfg: AugmentConfig) -> FundusSample:
    """Seeded color transform plus a common rotation of image and masks."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    alpha = float(rng.uniform(*cfg.alpha_range))
    angle = float(rng.uniform(*cfg.rotation_degrees))
    image = csa_transform(sample.image, stats, alpha).astype(np.float32)
    out = rotate_sample(replace(sample, image=image), angle)
    return replace(out, id=f"{sample.id}__csa{cfg.seed}", synthetic=True).validate()
