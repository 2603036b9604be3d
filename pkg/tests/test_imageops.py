import math

import numpy as np
import pytest

import akhbar.imageops as imageops
from akhbar.errors import ConfigError, ImageError
from akhbar.imageops import (
    DegradeSpec,
    ResizeKernel,
    crop,
    degrade,
    encode_jpeg,
    read_image,
    resize,
    run_degrade,
    write_image,
)
from akhbar.metrics.image import psnr
from akhbar.model import BoundingBox, Manifest, RasterImage, Sample, load_manifest

from conftest import constant_image, make_image


class TestDegradeSpec:
    def test_effective_quality(self):
        assert DegradeSpec(scale_factor=4, quality_reduction=30).effective_quality == 70

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            DegradeSpec(quality_reduction=100)
        with pytest.raises(ConfigError):
            DegradeSpec(scale_factor=0)
        with pytest.raises(ConfigError):
            DegradeSpec(quality_reduction=50, base_quality=40)


class TestDegrade:
    def test_dimensions_are_floored(self):
        image = make_image(403, 398, seed=2)
        out = degrade(image, DegradeSpec(scale_factor=4))
        assert (out.width, out.height) == (100, 99)

    def test_400_to_100(self):
        out = degrade(make_image(400, 400, seed=3), DegradeSpec(scale_factor=4))
        assert (out.width, out.height) == (100, 100)

    def test_encoder_receives_quality_70(self, monkeypatch):
        seen = []
        original = imageops.encode_jpeg

        def spy(image, quality):
            seen.append(quality)
            return original(image, quality)

        monkeypatch.setattr(imageops, "encode_jpeg", spy)
        degrade(make_image(64, 64, seed=4), DegradeSpec(scale_factor=4, quality_reduction=30))
        assert seen == [70]

    def test_deterministic_bytes(self):
        image = make_image(128, 96, seed=5)
        spec = DegradeSpec()
        first = imageops.degrade_to_jpeg(image, spec)[1]
        second = imageops.degrade_to_jpeg(image, spec)[1]
        assert first == second

    def test_too_small_rejected(self):
        with pytest.raises(ImageError):
            degrade(make_image(3, 10, seed=6), DegradeSpec(scale_factor=4))

    def test_identity_path(self):
        # scale 1 and reduction 0 still round-trips JPEG; use a JPEG-stable
        # image (uniform gray) so the pixels survive exactly
        image = constant_image(32, 32, 128)
        out = degrade(image, DegradeSpec(scale_factor=1, quality_reduction=0))
        np.testing.assert_array_equal(out.to_array(), image.to_array())


class TestCrop:
    def test_full_image_is_copy(self):
        image = make_image(20, 10, seed=7)
        out = crop(image, BoundingBox(0, 0, 20, 10))
        np.testing.assert_array_equal(out.to_array(), image.to_array())

    def test_interior_box_matches_slice(self):
        image = make_image(100, 100, seed=8)
        out = crop(image, BoundingBox(10, 10, 20, 20))
        assert (out.width, out.height) == (10, 10)
        np.testing.assert_array_equal(out.to_array(), image.to_array()[10:20, 10:20])

    def test_clamps_past_edge(self):
        image = make_image(100, 50, seed=9)
        out = crop(image, BoundingBox(90, 10, 105, 20))
        assert (out.width, out.height) == (10, 10)

    def test_padding_expands(self):
        image = make_image(100, 100, seed=10)
        out = crop(image, BoundingBox(10, 10, 20, 20), padding=4)
        assert (out.width, out.height) == (18, 18)

    def test_disjoint_raises(self):
        image = make_image(10, 10, seed=11)
        with pytest.raises(ImageError):
            crop(image, BoundingBox(50, 50, 60, 60))

    def test_fractional_box_rounds_outward(self):
        image = make_image(30, 30, seed=12)
        out = crop(image, BoundingBox(3.2, 3.9, 5.1, 6.0))
        assert (out.width, out.height) == (3, 3)  # floor(3.2)=3 .. ceil(5.1)=6


class TestResize:
    def test_identity_dimensions(self):
        image = make_image(9, 9, seed=13)
        assert resize(image, 9, 9, ResizeKernel.BOX) is image

    def test_box_average_rounds_half_up(self):
        arr = np.array([[0, 0], [255, 255]], dtype=np.uint8)
        out = resize(RasterImage.from_array(arr), 1, 1, ResizeKernel.BOX)
        assert out.to_array()[0, 0, 0] == 128

    def test_upscale_constant_stays_constant(self):
        image = constant_image(1, 1, 55)
        for kernel in ResizeKernel:
            out = resize(image, 4, 4, kernel)
            assert np.all(out.to_array() == 55)

    def test_target_validation(self):
        with pytest.raises(ImageError):
            resize(make_image(4, 4), 0, 4)


def test_degrade_then_upscale_is_worse_than_recompression():
    # sanity ordering on a structured natural-ish image
    rng = np.random.default_rng(99)
    base = rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
    arr = np.kron(base, np.ones((8, 8, 1), dtype=np.uint8))  # 128x128 blocky image
    image = RasterImage.from_array(arr)

    degraded = degrade(image, DegradeSpec(scale_factor=4, quality_reduction=30))
    upscaled = resize(degraded, image.width, image.height, ResizeKernel.BICUBIC)
    psnr_degraded = psnr(image, upscaled).psnr_db

    recompressed = imageops.decode_image_bytes(encode_jpeg(image, quality=70))
    psnr_recompressed = psnr(image, recompressed).psnr_db

    assert math.isfinite(psnr_degraded)
    assert psnr_degraded < psnr_recompressed


class TestRunDegrade:
    def test_writes_paired_manifest(self, tmp_path):
        image_path = tmp_path / "page.png"
        write_image(make_image(64, 48, seed=20), image_path)
        manifest = Manifest(samples=(
            Sample(id="p1", image_path=str(image_path), reference_text="متن"),
        ), split_name="mini")
        paired, failures = run_degrade(manifest, DegradeSpec(), tmp_path / "out")
        assert failures == []
        assert len(paired) == 1
        sample = paired.samples[0]
        assert sample.pair_path == str(image_path)
        assert sample.reference_text == "متن"
        low = read_image(sample.image_path)
        assert (low.width, low.height) == (16, 12)
        reloaded = load_manifest(tmp_path / "out" / "degraded.jsonl")
        assert reloaded.samples[0].id == "p1"

    def test_missing_image_is_isolated(self, tmp_path):
        good = tmp_path / "ok.png"
        write_image(make_image(32, 32, seed=21), good)
        manifest = Manifest(samples=(
            Sample(id="bad", image_path=str(tmp_path / "missing.png")),
            Sample(id="good", image_path=str(good)),
        ))
        paired, failures = run_degrade(manifest, DegradeSpec(), tmp_path / "out")
        assert [f[0] for f in failures] == ["bad"]
        assert [s.id for s in paired] == ["good"]
