import numpy as np
import pytest

from vesselseg.data import FundusSample, save_image, save_mask


def vessel_sample(sid: str, seed: int, size: int = 128) -> FundusSample:
    """Synthetic sample: bright line 'vessels' on a dark background."""
    rng = np.random.default_rng(seed)
    mask = np.zeros((size, size), np.uint8)
    for _ in range(6):
        r = int(rng.integers(8, size - 8))
        c0, c1 = sorted(rng.integers(0, size, 2))
        mask[r - 1:r + 1, c0:c1] = 1
    for _ in range(6):
        c = int(rng.integers(8, size - 8))
        r0, r1 = sorted(rng.integers(0, size, 2))
        mask[r0:r1, c - 1:c + 1] = 1
    img = np.stack([0.2 + 0.6 * mask + 0.05 * rng.random((size, size))
                    for _ in range(3)], axis=-1).astype(np.float32).clip(0, 1)
    return FundusSample(sid, img, mask, np.ones((size, size), np.uint8))


def random_sample(sid: str, seed: int, size: int = 16) -> FundusSample:
    rng = np.random.default_rng(seed)
    img = rng.random((size, size, 3)).astype(np.float32)
    mask = (rng.random((size, size)) > 0.7).astype(np.uint8)
    fov = np.ones((size, size), np.uint8)
    return FundusSample(sid, img, mask, fov)


def write_dataset(root, samples) -> None:
    for s in samples:
        save_image(root / "images" / f"{s.id}.png", s.image)
        save_mask(root / "masks" / f"{s.id}.png", s.vessel_mask)
        save_mask(root / "fov" / f"{s.id}.png", s.fov_mask)


@pytest.fixture
def tiny_dataset_dir(tmp_path):
    root = tmp_path / "ds"
    write_dataset(root, [vessel_sample(f"img{i}", i, size=32) for i in range(4)])
    return root
