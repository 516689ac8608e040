import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from mgmoe.imagecore import (PSNR_CAP, ImageError, as_image, center_crop, constant, load_png,
                             mse, psnr, save_png, ssim, to_uint8)

# analytic: E[MSE] = sigma^2 for sigma = 25/255, so PSNR = 20 log10(255/25)
NOISE_PSNR_25 = 20 * np.log10(255 / 25)


def test_noise_psnr_oracle_frozen():
    assert NOISE_PSNR_25 == pytest.approx(20.172, abs=1e-3)


def test_psnr_of_known_mse():
    a = constant(16, 16, 0.5)
    b = constant(16, 16, 0.6)
    assert mse(a, b) == pytest.approx(0.01)
    assert psnr(a, b) == pytest.approx(20.0)


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).random((12, 12, 3))
    assert psnr(a, a) == PSNR_CAP == 99.0


def test_psnr_monte_carlo_noise():
    # over 10^6 samples, clipping at 0.5 +- 4 sigma is negligible
    rng = np.random.default_rng(1)
    clean = constant(600, 600, 0.5)
    noisy = np.clip(clean + rng.normal(0, 25 / 255, clean.shape), 0, 1)
    assert abs(psnr(noisy, clean) - NOISE_PSNR_25) < 0.15


def test_dimension_mismatch():
    with pytest.raises(ImageError):
        psnr(constant(8, 8, 0), constant(8, 9, 0))
    with pytest.raises(ImageError):
        ssim(constant(8, 8, 0), constant(9, 8, 0))


def test_ssim_identical_and_constants():
    a = np.random.default_rng(2).random((20, 20, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(constant(16, 16, 0.5), constant(16, 16, 0.5)) == pytest.approx(1.0)
    assert ssim(constant(16, 16, 0.0), constant(16, 16, 1.0)) < 0.01


def test_ssim_constants_closed_form():
    # luminance term only: (2 m1 m2 + c1) / (m1^2 + m2^2 + c1)
    c1 = 0.01 ** 2
    expect = (2 * 0.2 * 0.7 + c1) / (0.2 ** 2 + 0.7 ** 2 + c1)
    assert ssim(constant(24, 24, 0.2), constant(24, 24, 0.7)) == pytest.approx(expect, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((40, 48, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0, channel_axis=-1)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 0.3))
def test_ssim_symmetric_and_bounded(seed, noise):
    rng = np.random.default_rng(seed)
    a = rng.random((16, 16, 3))
    b = np.clip(a + rng.normal(0, noise + 1e-3, a.shape), 0, 1)
    s = ssim(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(ssim(b, a), abs=1e-12)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(3).random((17, 23, 3))
    save_png(img, tmp_path / "x.png")
    back = load_png(tmp_path / "x.png")
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1 / 255 + 1e-12


def test_half_gray_rounds_up(tmp_path):
    # 0.5 * 255 = 127.5 rounds half up to 128
    save_png(constant(8, 8, 0.5), tmp_path / "g.png")
    assert np.all(load_png(tmp_path / "g.png") == 128 / 255)
    assert to_uint8(np.array([0.0, 1.0, 0.5])).tolist() == [0, 255, 128]


def test_load_rejects_small_and_non_png(tmp_path):
    from PIL import Image
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "s.png")
    with pytest.raises(ImageError):
        load_png(tmp_path / "s.png")
    Image.fromarray(np.zeros((9, 9, 3), np.uint8)).save(tmp_path / "s.jpg")
    with pytest.raises(ImageError):
        load_png(tmp_path / "s.jpg")
    Image.fromarray(np.zeros((9, 9), np.uint8)).save(tmp_path / "gray.png")
    with pytest.raises(ImageError):
        load_png(tmp_path / "gray.png")


def test_as_image_validation():
    with pytest.raises(ImageError):
        as_image(np.zeros((8, 8)))
    with pytest.raises(ImageError):
        as_image(np.full((8, 8, 3), np.nan))
    assert as_image(np.full((8, 8, 3), 2.0)).max() == 1.0


def test_center_crop_box():
    img = np.random.default_rng(4).random((30, 40, 3))
    crop, box = center_crop(img, 20)
    assert box == (10, 5, 20)
    assert np.array_equal(crop, img[5:25, 10:30])
    with pytest.raises(ImageError):
        center_crop(img, 31)
