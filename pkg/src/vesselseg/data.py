"""Dataset layout, image/mask IO, resizing and the Jaccard distance primitive.

Expected directory layout for a dataset root:
  <root>/images/*.png|tif|jpg      color fundus images
  <root>/masks/*.png|tif|jpg       binary vessel ground-truth
  <root>/fov/*.png|tif|jpg         binary field-of-view masks (optional)
Files are paired by filename stem.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".tif", ".tiff", ".jpg", ".jpeg")


class ValidationError(ValueError):
    """Raised when inputs violate a documented contract."""


@dataclass
class FundusSample:
    """One registered (image, vessel mask, FOV mask) triple."""

    id: str
    image: np.ndarray        # (H, W, 3) float32 in [0, 1]
    vessel_mask: np.ndarray  # (H, W) uint8 in {0, 1}
    fov_mask: np.ndarray     # (H, W) uint8 in {0, 1}
    source_dataset: str = ""
    synthetic: bool = False

    def validate(self) -> "FundusSample":
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"sample {self.id}: image must be HxWx3, got {self.image.shape}")
        h, w = self.image.shape[:2]
        for name, m in (("vessel_mask", self.vessel_mask), ("fov_mask", self.fov_mask)):
            if m.shape != (h, w):
                raise ValidationError(
                    f"sample {self.id}: {name} shape {m.shape} does not match image {(h, w)}")
            vals = np.unique(m)
            if not np.isin(vals, (0, 1)).all():
                raise ValidationError(f"sample {self.id}: {name} is not binary (values {vals})")
        return self


def _read_raster(path, color: bool) -> np.ndarray:
    flag = cv2.IMREAD_COLOR if color else cv2.IMREAD_GRAYSCALE
    arr = cv2.imread(str(path), flag)
    if arr is None:
        raise IOError(f"cannot read image file: {path}")
    if color:
        arr = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB)
    return arr


def _to_unit(arr: np.ndarray) -> np.ndarray:
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return (arr.astype(np.float32) / scale).clip(0.0, 1.0)


def binarize(arr: np.ndarray) -> np.ndarray:
    """Threshold a grayscale mask at half of full scale."""
    return (_to_unit(arr) >= 0.5).astype(np.uint8)


def load_sample(image_path, mask_path, fov_path=None, source_dataset: str = "") -> FundusSample:
    """Load one sample; a missing FOV path yields an all-ones FOV mask."""
    image_path = Path(image_path)
    image = _to_unit(_read_raster(image_path, color=True))
    vessel = binarize(_read_raster(mask_path, color=False))
    if fov_path is not None:
        fov = binarize(_read_raster(fov_path, color=False))
    else:
        log.warning("no FOV mask for %s; assuming full field of view", image_path.name)
        fov = np.ones(vessel.shape, dtype=np.uint8)
    return FundusSample(
        id=image_path.stem, image=image, vessel_mask=vessel, fov_mask=fov,
        source_dataset=source_dataset,
    ).validate()


def save_image(path, image: np.ndarray) -> None:
    """Write a [0,1] float image (gray or RGB) as 8-bit PNG."""
    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    if arr.ndim == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), arr):
        raise IOError(f"cannot write image file: {path}")


def save_mask(path, mask: np.ndarray) -> None:
    save_image(path, mask.astype(np.float32))


def discover_dataset(root, source_dataset: str | None = None) -> list[FundusSample]:
    """Load every image/mask pair under the standard layout, sorted by stem."""
    root = Path(root)
    images_dir, masks_dir, fov_dir = root / "images", root / "masks", root / "fov"
    if not images_dir.is_dir() or not masks_dir.is_dir():
        raise IOError(f"dataset root {root} must contain images/ and masks/")

    def index(d: Path) -> dict:
        if not d.is_dir():
            return {}
        return {p.stem: p for p in sorted(d.iterdir())
                if p.suffix.lower() in IMAGE_EXTS}

    masks = index(masks_dir)
    fovs = index(fov_dir)
    name = source_dataset if source_dataset is not None else root.name
    samples = []
    for stem, img_path in sorted(index(images_dir).items()):
        if stem not in masks:
            log.warning("image %s has no matching mask; skipped", img_path.name)
            continue
        samples.append(load_sample(img_path, masks[stem], fovs.get(stem), source_dataset=name))
    if not samples:
        raise IOError(f"no image/mask pairs found under {root}")
    return samples


def check_divisible_by_8(height: int, width: int) -> None:
    if height <= 0 or width <= 0 or height % 8 or width % 8:
        raise ValidationError(
            f"target size {height}x{width} invalid: three 2x downsamplings require "
            "positive dimensions divisible by 8")


def resize_sample(sample: FundusSample, target: tuple[int, int]) -> FundusSample:
    """Resize to (height, width): bilinear for the image, nearest for masks."""
    h, w = target
    check_divisible_by_8(h, w)
    image = cv2.resize(sample.image, (w, h), interpolation=cv2.INTER_LINEAR)
    vessel = cv2.resize(sample.vessel_mask, (w, h), interpolation=cv2.INTER_NEAREST)
    fov = cv2.resize(sample.fov_mask, (w, h), interpolation=cv2.INTER_NEAREST)
    return replace(sample, image=image, vessel_mask=vessel, fov_mask=fov).validate()


def green_channel(sample: FundusSample) -> np.ndarray:
    """Green channel of the RGB image as a float field in [0, 1]."""
    return np.ascontiguousarray(sample.image[:, :, 1], dtype=np.float32)


def jaccard_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - |a & b| / |a | b| over binary masks; two empty masks have distance 0."""
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a_b = a.astype(bool)
    b_b = b.astype(bool)
    union = int(np.logical_or(a_b, b_b).sum())
    if union == 0:
        return 0.0
    inter = int(np.logical_and(a_b, b_b).sum())
    return 1.0 - inter / union
