"""Integer-factor super-resolution behind pluggable backends.

The neural path runs a TorchScript model over overlapping tiles (reflective
padding out to tile boundaries, unweighted averaging where tiles overlap) so
window-based models see dimension-multiple inputs. A bicubic fallback and a
digest-keyed replay backend let the full pipeline run with no model files.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import BackendError, FixtureMissError, ManifestError
from .imageops import ResizeKernel, read_image, resize
from .metrics.image import PsnrMode, PsnrScore, psnr
from .model import Manifest, PathLike, RasterImage

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UpscalerConfig:
    scale: int = 4
    model_path: Optional[str] = None
    tile_size: int = 256
    tile_overlap: int = 16

    def __post_init__(self) -> None:
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.tile_size < 1:
            raise ValueError(f"tile_size must be >= 1, got {self.tile_size}")
        if not 0 <= self.tile_overlap < self.tile_size:
            raise ValueError(
                f"tile_overlap must be in [0, tile_size), got {self.tile_overlap}"
            )


class BicubicUpscaler:
    """Deterministic classical fallback; needs no model file."""

    def upscale(self, image: RasterImage, config: UpscalerConfig) -> RasterImage:
        return resize(
            image, image.width * config.scale, image.height * config.scale, ResizeKernel.BICUBIC
        )


class ReplayUpscaler:
    """Serves recorded output images keyed by input digest.

    The fixture is line-delimited ``{"image_digest": ..., "output": path}``
    with paths resolved relative to the fixture file.
    """

    def __init__(self, fixture_path: PathLike):
        self._path = Path(fixture_path)
        self._index: dict[str, Path] = {}
        with open(self._path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ManifestError(f"{self._path}:{lineno}: invalid record: {exc}") from exc
                self._index[record["image_digest"]] = self._path.parent / record["output"]

    def upscale(self, image: RasterImage, config: UpscalerConfig) -> RasterImage:
        digest = image.digest()
        if digest not in self._index:
            raise FixtureMissError(
                f"no recorded upscale for digest {digest[:16]}... in {self._path}"
            )
        return read_image(self._index[digest])


def tile_plan(length: int, tile: int, stride: int) -> tuple[int, int]:
    """(tile_count, padded_length) covering ``length`` with the given stride."""
    if length <= tile:
        return 1, tile
    count = 1 + math.ceil((length - tile) / stride)
    return count, tile + (count - 1) * stride


def _reflect_pad(arr: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    # reflect repeats as needed but cannot pad a length-1 axis; use edge there
    h, w = arr.shape[1], arr.shape[2]
    mode = "reflect" if (pad_h == 0 or h > 1) and (pad_w == 0 or w > 1) else "edge"
    return np.pad(arr, ((0, 0), (0, pad_h), (0, pad_w)), mode=mode)


def tiled_upscale(
    run_tile: Callable[[np.ndarray], np.ndarray],
    image: RasterImage,
    config: UpscalerConfig,
) -> RasterImage:
    """Cover the image with overlapping tiles, upscale each, blend by averaging.

    ``run_tile`` maps a float32 (C, tile, tile) array in [0, 1] to the
    (C, scale*tile, scale*tile) result. Output samples are rounded half-up.
    """
    s = config.scale
    arr = image.to_array().transpose(2, 0, 1).astype(np.float32) / 255.0
    c, h, w = arr.shape
    stride = config.tile_size - config.tile_overlap
    rows, pad_h = tile_plan(h, config.tile_size, stride)
    cols, pad_w = tile_plan(w, config.tile_size, stride)
    padded = _reflect_pad(arr, pad_h - h, pad_w - w)

    out_sum = np.zeros((c, pad_h * s, pad_w * s), dtype=np.float64)
    out_cnt = np.zeros((1, pad_h * s, pad_w * s), dtype=np.float64)
    for row in range(rows):
        y = row * stride
        for col in range(cols):
            x = col * stride
            tile = padded[:, y : y + config.tile_size, x : x + config.tile_size]
            result = run_tile(np.ascontiguousarray(tile))
            expected = (c, config.tile_size * s, config.tile_size * s)
            if result.shape != expected:
                raise BackendError(
                    f"tile output shape {result.shape} does not match expected {expected}"
                )
            out_sum[:, y * s : (y + config.tile_size) * s, x * s : (x + config.tile_size) * s] += result
            out_cnt[:, y * s : (y + config.tile_size) * s, x * s : (x + config.tile_size) * s] += 1.0
    blended = out_sum / out_cnt
    cropped = blended[:, : h * s, : w * s]
    samples = np.clip(np.floor(cropped * 255.0 + 0.5), 0.0, 255.0).astype(np.uint8)
    return RasterImage.from_array(samples.transpose(1, 2, 0))


class NeuralUpscaler:
    """TorchScript super-resolution model with tiled inference.

    The model must map float32 (1, 3, H, W) in [0, 1] to (1, 3, sH, sW).
    Grayscale inputs are expanded to three channels first, so this backend
    always yields RGB.
    """

    def __init__(self, model_path: PathLike):
        try:
            import torch
        except ImportError as exc:
            raise BackendError("neural upscaler requires torch (install the 'neural' extra)") from exc
        self._torch = torch
        try:
            self._model = torch.jit.load(str(model_path), map_location="cpu")
        except (RuntimeError, OSError, ValueError) as exc:
            raise BackendError(f"cannot load upscaler model {model_path}: {exc}") from exc
        self._model.eval()

    def _run_tile(self, tile: np.ndarray) -> np.ndarray:
        torch = self._torch
        batch = torch.from_numpy(tile[None])
        try:
            with torch.no_grad():
                out = self._model(batch)
        except RuntimeError as exc:
            raise BackendError(
                f"upscaler inference failed for input {tuple(batch.shape)}: {exc}"
            ) from exc
        result = out.detach().cpu().numpy()
        if result.ndim != 4 or result.shape[0] != 1:
            raise BackendError(f"upscaler output shape {result.shape} is not (1, C, sH, sW)")
        return result[0]

    def upscale(self, image: RasterImage, config: UpscalerConfig) -> RasterImage:
        arr = image.to_array()
        if arr.shape[2] == 1:
            image = RasterImage.from_array(np.repeat(arr, 3, axis=2))
        return tiled_upscale(self._run_tile, image, config)


def upscale(image: RasterImage, backend, config: UpscalerConfig) -> RasterImage:
    """Upscale through any backend, enforcing the output-dimension contract."""
    result = backend.upscale(image, config)
    expected = (image.width * config.scale, image.height * config.scale)
    if (result.width, result.height) != expected:
        raise BackendError(
            f"backend produced {result.width}x{result.height}, "
            f"expected exactly {expected[0]}x{expected[1]}"
        )
    return result


@dataclass(frozen=True)
class SrBenchResult:
    """Aggregate PSNR over (output, reference) pairs.

    ``mean_psnr_db`` averages per-pair PSNR in dB over finite pairs only;
    pairs with zero error are tallied in ``exact_count``. ``mean_psnr_db`` is
    None when no finite pair exists (all exact, or nothing scored).
    """

    pair_count: int
    mean_psnr_db: Optional[float]
    exact_count: int
    per_pair: tuple[tuple[str, PsnrScore], ...]
    failures: tuple[tuple[str, str], ...]

    @property
    def all_exact(self) -> bool:
        return self.pair_count > 0 and self.exact_count == self.pair_count


def score_sr_pairs(manifest: Manifest, mode: PsnrMode = PsnrMode.RGB) -> SrBenchResult:
    """Score every manifest sample that has a reference pair.

    The sample image is the candidate and ``pair`` is the reference. Pairs
    failing to load or mismatching dimensions are recorded and skipped.
    """
    scored: list[tuple[str, PsnrScore]] = []
    failures: list[tuple[str, str]] = []
    exact = 0
    finite: list[float] = []
    for sample in manifest:
        if sample.pair_path is None:
            continue
        try:
            candidate = read_image(sample.image_path)
            reference = read_image(sample.pair_path)
            score = psnr(reference, candidate, mode)
        except Exception as exc:  # per-pair isolation: one bad pair never aborts
            logger.warning("psnr pair %s failed: %s", sample.id, exc)
            failures.append((sample.id, str(exc)))
            continue
        scored.append((sample.id, score))
        if math.isinf(score.psnr_db):
            exact += 1
        else:
            finite.append(score.psnr_db)
    mean = float(np.mean(finite)) if finite else None
    return SrBenchResult(
        pair_count=len(scored),
        mean_psnr_db=mean,
        exact_count=exact,
        per_pair=tuple(scored),
        failures=tuple(failures),
    )
