import numpy as np
import pytest

from akhbar.errors import BackendError, FixtureMissError
from akhbar.imageops import write_image
from akhbar.metrics.image import PsnrMode
from akhbar.model import Manifest, Sample
from akhbar.superres import (
    BicubicUpscaler,
    ReplayUpscaler,
    UpscalerConfig,
    score_sr_pairs,
    tile_plan,
    tiled_upscale,
    upscale,
)

from conftest import constant_image, make_image


def nearest_tile(tile: np.ndarray, scale: int = 4) -> np.ndarray:
    """Pointwise (tiling-equivariant) test upscaler: pixel repetition."""
    return tile.repeat(scale, axis=1).repeat(scale, axis=2)


class TestConfig:
    def test_overlap_must_be_smaller_than_tile(self):
        with pytest.raises(ValueError):
            UpscalerConfig(tile_size=32, tile_overlap=32)

    def test_scale_positive(self):
        with pytest.raises(ValueError):
            UpscalerConfig(scale=0)


class TestBicubic:
    def test_dimension_contract(self):
        out = upscale(make_image(25, 25, seed=1), BicubicUpscaler(), UpscalerConfig(scale=4))
        assert (out.width, out.height) == (100, 100)

    def test_constant_stays_constant(self):
        out = upscale(constant_image(5, 3, 99), BicubicUpscaler(), UpscalerConfig(scale=4))
        assert np.all(out.to_array() == 99)

    @pytest.mark.parametrize("width,height", [(1, 1), (3, 7), (17, 2)])
    def test_contract_for_odd_sizes(self, width, height):
        for scale in (1, 2, 4):
            out = upscale(make_image(width, height, seed=2), BicubicUpscaler(),
                          UpscalerConfig(scale=scale))
            assert (out.width, out.height) == (width * scale, height * scale)

    def test_determinism(self):
        image = make_image(13, 9, seed=3)
        config = UpscalerConfig(scale=4)
        a = upscale(image, BicubicUpscaler(), config)
        b = upscale(image, BicubicUpscaler(), config)
        assert a.pixel_data == b.pixel_data


class TestReplay:
    def test_replay_identity(self, tmp_path):
        source = make_image(10, 10, seed=4)
        stored = make_image(40, 40, seed=5)
        write_image(stored, tmp_path / "out.png")
        (tmp_path / "sr.jsonl").write_text(
            '{"image_digest":"%s","output":"out.png"}\n' % source.digest(), encoding="utf-8"
        )
        backend = ReplayUpscaler(tmp_path / "sr.jsonl")
        out = upscale(source, backend, UpscalerConfig(scale=4))
        assert out.pixel_data == stored.pixel_data

    def test_miss_is_loud(self, tmp_path):
        (tmp_path / "sr.jsonl").write_text("")
        backend = ReplayUpscaler(tmp_path / "sr.jsonl")
        with pytest.raises(FixtureMissError):
            upscale(make_image(4, 4, seed=6), backend, UpscalerConfig(scale=4))


class BadBackend:
    def upscale(self, image, config):
        return constant_image(1, 1, 0)


def test_dimension_contract_enforced():
    with pytest.raises(BackendError, match="expected exactly"):
        upscale(make_image(4, 4, seed=7), BadBackend(), UpscalerConfig(scale=4))


class TestTiling:
    def test_tile_plan(self):
        assert tile_plan(100, 256, 240) == (1, 256)
        assert tile_plan(256, 256, 240) == (1, 256)
        assert tile_plan(257, 256, 240) == (2, 496)

    def test_tiled_equals_direct_for_pointwise_backend(self):
        image = make_image(70, 55, seed=8)
        config = UpscalerConfig(scale=4, tile_size=32, tile_overlap=8)
        tiled = tiled_upscale(lambda t: nearest_tile(t, 4), image, config)
        direct = image.to_array().repeat(4, axis=0).repeat(4, axis=1)
        np.testing.assert_allclose(tiled.to_array().astype(float), direct.astype(float),
                                   atol=1e-6)

    def test_tiny_image_padding(self):
        image = make_image(1, 1, seed=9)
        config = UpscalerConfig(scale=2, tile_size=8, tile_overlap=2)
        out = tiled_upscale(lambda t: nearest_tile(t, 2), image, config)
        assert (out.width, out.height) == (2, 2)
        assert np.all(out.to_array() == image.to_array()[0, 0])

    def test_bad_tile_shape_rejected(self):
        image = make_image(10, 10, seed=10)
        config = UpscalerConfig(scale=4, tile_size=8, tile_overlap=2)
        with pytest.raises(BackendError):
            tiled_upscale(lambda t: t, image, config)


class TestScorePairs:
    def _manifest(self, tmp_path, pairs):
        samples = []
        for i, (candidate, reference) in enumerate(pairs):
            cand_path = tmp_path / f"cand{i}.png"
            ref_path = tmp_path / f"ref{i}.png"
            write_image(candidate, cand_path)
            write_image(reference, ref_path)
            samples.append(Sample(id=f"p{i}", image_path=str(cand_path), pair_path=str(ref_path)))
        return Manifest(samples=tuple(samples))

    def test_all_exact(self, tmp_path):
        image = make_image(12, 12, seed=11)
        result = score_sr_pairs(self._manifest(tmp_path, [(image, image)] * 2))
        assert result.pair_count == 2
        assert result.exact_count == 2
        assert result.mean_psnr_db is None
        assert result.all_exact

    def test_mean_of_zero_db_pairs(self, tmp_path):
        black = constant_image(6, 6, 0)
        white = constant_image(6, 6, 255)
        result = score_sr_pairs(self._manifest(tmp_path, [(black, white), (white, black)]))
        assert result.pair_count == 2
        assert result.mean_psnr_db == pytest.approx(0.0, abs=1e-9)

    def test_mismatched_pair_recorded_and_skipped(self, tmp_path):
        good = make_image(8, 8, seed=12)
        result = score_sr_pairs(self._manifest(
            tmp_path, [(good, good), (make_image(8, 8, seed=13), make_image(9, 8, seed=14))]
        ))
        assert result.pair_count == 1
        assert len(result.failures) == 1
        assert result.failures[0][0] == "p1"

    def test_luma_mode_passes_through(self, tmp_path):
        image = make_image(8, 8, seed=15)
        result = score_sr_pairs(self._manifest(tmp_path, [(image, image)]), PsnrMode.LUMA)
        assert result.exact_count == 1
