import numpy as np
import pytest

from vesselseg.data import (FundusSample, ValidationError, green_channel,
                            jaccard_distance, load_sample, resize_sample,
                            save_image, save_mask)

from conftest import random_sample


def _write_triplet(tmp_path, image, mask, fov=None):
    ip, mp = tmp_path / "img.png", tmp_path / "mask.png"
    save_image(ip, image)
    save_mask(mp, mask)
    fp = None
    if fov is not None:
        fp = tmp_path / "fov.png"
        save_mask(fp, fov)
    return ip, mp, fp


def test_load_scales_to_unit_range(tmp_path):
    image = np.ones((8, 8, 3), np.float32)
    mask = np.eye(8, dtype=np.uint8)
    ip, mp, _ = _write_triplet(tmp_path, image, mask)
    s = load_sample(ip, mp)
    assert s.image.max() == 1.0
    assert set(np.unique(s.vessel_mask)) <= {0, 1}


def test_missing_fov_defaults_to_all_ones(tmp_path, caplog):
    ip, mp, _ = _write_triplet(tmp_path, np.zeros((8, 8, 3)), np.zeros((8, 8), np.uint8))
    with caplog.at_level("WARNING"):
        s = load_sample(ip, mp)
    assert (s.fov_mask == 1).all()
    assert any("FOV" in r.message for r in caplog.records)


def test_dimension_mismatch_rejected(tmp_path):
    ip, _, _ = _write_triplet(tmp_path, np.zeros((20, 20, 3)), np.zeros((20, 20), np.uint8))
    mp = tmp_path / "small.png"
    save_mask(mp, np.zeros((10, 10), np.uint8))
    with pytest.raises(ValidationError):
        load_sample(ip, mp)


def test_unreadable_file_names_path(tmp_path):
    with pytest.raises(IOError, match="nothere"):
        load_sample(tmp_path / "nothere.png", tmp_path / "nothere.png")


def test_resize_drive_and_hrf_targets():
    drive = random_sample("d", 0, size=16)
    drive = FundusSample("d", np.zeros((584, 565, 3), np.float32),
                         np.zeros((584, 565), np.uint8), np.ones((584, 565), np.uint8))
    out = resize_sample(drive, (584, 568))
    assert out.image.shape == (584, 568, 3)

    hrf = FundusSample("h", np.zeros((2336, 3504, 3), np.float32),
                       np.zeros((2336, 3504), np.uint8), np.ones((2336, 3504), np.uint8))
    out = resize_sample(hrf, (512, 512))
    assert out.image.shape == (512, 512, 3)


def test_resize_rejects_non_multiple_of_8():
    s = random_sample("s", 0, size=16)
    with pytest.raises(ValidationError, match="divisible by 8"):
        resize_sample(s, (570, 584))


def test_resize_preserves_mask_binarity():
    s = random_sample("s", 3, size=40)
    out = resize_sample(s, (24, 24))
    assert set(np.unique(out.vessel_mask)) <= {0, 1}
    assert set(np.unique(out.fov_mask)) <= {0, 1}
    assert out.id == s.id and out.synthetic == s.synthetic


def test_green_channel_selection():
    base = np.zeros((4, 4, 3), np.float32)
    green = base.copy()
    green[:, :, 1] = 1.0
    mk = lambda img: FundusSample("x", img, np.zeros((4, 4), np.uint8),
                                  np.ones((4, 4), np.uint8))
    assert (green_channel(mk(green)) == 1.0).all()
    red = base.copy()
    red[:, :, 0] = 1.0
    assert (green_channel(mk(red)) == 0.0).all()
    px = base.copy()
    px[0, 0] = (0.2, 0.7, 0.1)
    assert green_channel(mk(px))[0, 0] == pytest.approx(0.7)


def test_jaccard_examples():
    a = np.zeros((4, 4), np.uint8)
    a[0, 0] = a[0, 1] = 1
    assert jaccard_distance(a, a) == 0.0
    b = np.zeros((4, 4), np.uint8)
    b[3, 3] = 1
    assert jaccard_distance(a, b) == 1.0
    c = np.zeros((4, 4), np.uint8)
    c[0, 1] = c[0, 2] = 1  # shares one pixel with a
    assert jaccard_distance(a, c) == pytest.approx(1 - 1 / 3, abs=1e-4)


def test_jaccard_empty_union_and_mismatch():
    z = np.zeros((4, 4), np.uint8)
    assert jaccard_distance(z, z) == 0.0
    with pytest.raises(ValidationError):
        jaccard_distance(z, np.zeros((5, 5), np.uint8))


def test_jaccard_symmetry_500_pairs():
    rng = np.random.default_rng(7)
    for _ in range(500):
        a = (rng.random((8, 8)) > 0.5).astype(np.uint8)
        b = (rng.random((8, 8)) > 0.5).astype(np.uint8)
        assert jaccard_distance(a, b) == jaccard_distance(b, a)
        assert jaccard_distance(a, a) == 0.0


def test_save_load_roundtrip_within_one_level(tmp_path):
    s = random_sample("rt", 11, size=16)
    ip, mp, fp = _write_triplet(tmp_path, s.image, s.vessel_mask, s.fov_mask)
    back = load_sample(ip, mp, fp)
    assert np.abs(back.image - s.image).max() <= 1 / 255 + 1e-6
    assert (back.vessel_mask == s.vessel_mask).all()
    assert (back.fov_mask == s.fov_mask).all()
