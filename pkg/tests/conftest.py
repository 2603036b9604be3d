import numpy as np
import pytest

from akhbar.model import BoundingBox, Detection, GroundTruthBox, RasterImage


def make_image(width: int, height: int, seed: int = 0, channels: int = 3) -> RasterImage:
    """Deterministic pseudo-random test image."""
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(height, width, channels), dtype=np.uint8)
    return RasterImage.from_array(arr)


def constant_image(width: int, height: int, value: int, channels: int = 3) -> RasterImage:
    arr = np.full((height, width, channels), value, dtype=np.uint8)
    return RasterImage.from_array(arr)


def random_box(rng: np.random.Generator, width: float = 100.0, height: float = 100.0) -> BoundingBox:
    x0, x1 = sorted(rng.uniform(0, width, size=2))
    y0, y1 = sorted(rng.uniform(0, height, size=2))
    return BoundingBox(x0, y0, max(x1, x0 + 1e-3), max(y1, y0 + 1e-3))


def random_scene(
    rng: np.random.Generator, max_dets: int = 6, max_gts: int = 6, classes: int = 1
) -> tuple[list[Detection], list[GroundTruthBox]]:
    dets = [
        Detection(
            box=random_box(rng),
            class_id=int(rng.integers(0, classes)),
            confidence=float(rng.uniform(0, 1)),
        )
        for _ in range(int(rng.integers(0, max_dets + 1)))
    ]
    gts = [
        GroundTruthBox(box=random_box(rng), class_id=int(rng.integers(0, classes)))
        for _ in range(int(rng.integers(0, max_gts + 1)))
    ]
    return dets, gts


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20250811)
