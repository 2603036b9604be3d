import math

import numpy as np
import pytest

from akhbar.errors import ImageError
from akhbar.metrics.image import PsnrMode, psnr
from akhbar.model import RasterImage

from conftest import constant_image, make_image


def test_self_comparison_is_infinite():
    image = make_image(17, 11, seed=1)
    score = psnr(image, image)
    assert math.isinf(score.psnr_db)
    assert score.mse == 0.0


def test_max_difference_is_zero_db():
    score = psnr(constant_image(8, 8, 0), constant_image(8, 8, 255))
    assert score.mse == 65025.0
    assert score.psnr_db == pytest.approx(0.0, abs=1e-12)


def test_unit_difference():
    score = psnr(constant_image(8, 8, 100), constant_image(8, 8, 101))
    assert score.mse == 1.0
    assert score.psnr_db == pytest.approx(20 * math.log10(255), abs=1e-12)


def test_dimension_mismatch_names_shapes():
    with pytest.raises(ImageError, match=r"\(4, 6, 3\).*\(4, 5, 3\)"):
        psnr(make_image(6, 4), make_image(5, 4))


def test_channel_mismatch_in_rgb_mode():
    with pytest.raises(ImageError, match="channel"):
        psnr(make_image(4, 4, channels=3), make_image(4, 4, channels=1))


def test_luma_mode_accepts_mixed_channels():
    # BT.601 weights do not sum to exactly 1.0 in binary, so a gray-vs-RGB
    # pair of the same constant lands within float noise of identity.
    gray = constant_image(4, 4, 128, channels=1)
    rgb = constant_image(4, 4, 128, channels=3)
    score = psnr(gray, rgb, PsnrMode.LUMA)
    assert score.mse < 1e-20
    assert score.psnr_db > 250


def test_luma_mode_identical_gray_images():
    gray = constant_image(4, 4, 77, channels=1)
    assert math.isinf(psnr(gray, gray, PsnrMode.LUMA).psnr_db)


def test_luma_uses_bt601_weights():
    ref = constant_image(2, 2, 0, channels=3)
    arr = np.zeros((2, 2, 3), dtype=np.uint8)
    arr[:, :, 0] = 100  # red only
    cand = RasterImage.from_array(arr)
    score = psnr(ref, cand, PsnrMode.LUMA)
    assert score.mse == pytest.approx((0.299 * 100) ** 2)


def test_noise_monotonicity(rng):
    base = constant_image(16, 16, 128)
    previous = math.inf
    for amplitude in (2, 8, 32, 96):
        noise = rng.integers(-amplitude, amplitude + 1, size=(16, 16, 3))
        noisy = np.clip(base.to_array().astype(int) + noise, 0, 255).astype(np.uint8)
        score = psnr(base, RasterImage.from_array(noisy))
        assert score.psnr_db <= previous
        previous = score.psnr_db
