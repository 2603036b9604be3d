"""Deterministic image manipulation: degradation, cropping, resizing, codecs.

The degradation procedure box-downsamples by an integer factor and round-trips
the result through a JPEG encode at a reduced quality, pinned to 4:2:0 chroma
subsampling so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ImageError
from .model import BoundingBox, ColorSpace, Manifest, PathLike, RasterImage, Sample, save_manifest

logger = logging.getLogger(__name__)


class ResizeKernel(Enum):
    BOX = "box"
    BILINEAR = "bilinear"
    BICUBIC = "bicubic"


_PIL_KERNELS = {
    ResizeKernel.BOX: Image.Resampling.BOX,
    ResizeKernel.BILINEAR: Image.Resampling.BILINEAR,
    ResizeKernel.BICUBIC: Image.Resampling.BICUBIC,
}


@dataclass(frozen=True)
class DegradeSpec:
    """Parameters of the degradation procedure.

    ``quality_reduction`` is subtracted from ``base_quality`` to obtain the
    JPEG encoder quality, so the default reading of "reduce quality by 30"
    is encoder quality 70. Both knobs stay configurable.
    """

    scale_factor: int = 4
    quality_reduction: int = 30
    base_quality: int = 100

    def __post_init__(self) -> None:
        if self.scale_factor < 1:
            raise ConfigError(f"scale_factor must be >= 1, got {self.scale_factor}")
        if not 0 <= self.quality_reduction < 100:
            raise ConfigError(f"quality_reduction must be in [0, 100), got {self.quality_reduction}")
        if not 1 <= self.base_quality <= 100:
            raise ConfigError(f"base_quality must be in [1, 100], got {self.base_quality}")
        if not 1 <= self.effective_quality <= 100:
            raise ConfigError(
                f"effective quality {self.effective_quality} outside [1, 100] "
                f"(base {self.base_quality} - reduction {self.quality_reduction})"
            )

    @property
    def effective_quality(self) -> int:
        return self.base_quality - self.quality_reduction


# --- codecs -------------------------------------------------------------------


def _to_pil(image: RasterImage) -> Image.Image:
    mode = "L" if image.color_space is ColorSpace.GRAY else "RGB"
    arr = image.to_array()
    return Image.fromarray(arr[:, :, 0] if image.channels == 1 else arr, mode=mode)


def _from_pil(img: Image.Image) -> RasterImage:
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return RasterImage.from_array(np.asarray(img))


def read_image(path: PathLike) -> RasterImage:
    """Load a PNG/JPEG file as 8-bit grayscale or RGB."""
    with Image.open(path) as img:
        img.load()
        return _from_pil(img)


def image_size(path: PathLike) -> tuple[int, int]:
    """(width, height) from the file header, without decoding pixels."""
    with Image.open(path) as img:
        return img.size


def encode_jpeg(image: RasterImage, quality: int) -> bytes:
    """JPEG-encode with pinned settings: given quality, 4:2:0 subsampling."""
    buf = io.BytesIO()
    _to_pil(image).save(buf, format="JPEG", quality=quality, subsampling=2)
    return buf.getvalue()


def decode_image_bytes(data: bytes) -> RasterImage:
    with Image.open(io.BytesIO(data)) as img:
        img.load()
        return _from_pil(img)


def encode_png(image: RasterImage) -> bytes:
    buf = io.BytesIO()
    _to_pil(image).save(buf, format="PNG")
    return buf.getvalue()


def write_image(image: RasterImage, path: PathLike) -> None:
    """Write PNG or JPEG (quality 95) based on the file extension."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() in (".jpg", ".jpeg"):
        path.write_bytes(encode_jpeg(image, quality=95))
    else:
        path.write_bytes(encode_png(image))


# --- resampling ---------------------------------------------------------------


def _box_downsample(arr: np.ndarray, factor: int) -> np.ndarray:
    """Exact integer-factor block average with round-half-up.

    Crops to factor-divisible dimensions (top-left anchored) first, so output
    dimensions are exactly floor(H/f) x floor(W/f).
    """
    h, w, c = arr.shape
    out_h, out_w = h // factor, w // factor
    cropped = arr[: out_h * factor, : out_w * factor].astype(np.uint32)
    sums = cropped.reshape(out_h, factor, out_w, factor, c).sum(axis=(1, 3))
    n = factor * factor
    return ((2 * sums + n) // (2 * n)).astype(np.uint8)  # round-half-up of sums/n


def resize(
    image: RasterImage, new_width: int, new_height: int, kernel: ResizeKernel = ResizeKernel.BICUBIC
) -> RasterImage:
    """Deterministic resample to the target dimensions.

    BOX downscaling by an exact integer factor uses the integer block-average
    path (round-half-up); everything else goes through Pillow's resampler.
    """
    if new_width < 1 or new_height < 1:
        raise ImageError(f"target dimensions must be >= 1, got {new_width}x{new_height}")
    if (new_width, new_height) == (image.width, image.height):
        return image
    if (
        kernel is ResizeKernel.BOX
        and image.width % new_width == 0
        and image.height % new_height == 0
        and image.width // new_width == image.height // new_height
    ):
        return RasterImage.from_array(_box_downsample(image.to_array(), image.width // new_width))
    resampled = _to_pil(image).resize((new_width, new_height), _PIL_KERNELS[kernel])
    return _from_pil(resampled)


def degrade_to_jpeg(image: RasterImage, spec: DegradeSpec) -> tuple[RasterImage, bytes]:
    """Degrade and return both the decoded result and the encoded JPEG bytes,
    so callers persisting the file avoid a second lossy encode."""
    s = spec.scale_factor
    if image.width < s or image.height < s:
        raise ImageError(
            f"image {image.width}x{image.height} smaller than scale factor {s}"
        )
    small = RasterImage.from_array(_box_downsample(image.to_array(), s)) if s > 1 else image
    data = encode_jpeg(small, quality=spec.effective_quality)
    return decode_image_bytes(data), data


def degrade(image: RasterImage, spec: DegradeSpec) -> RasterImage:
    """Apply the two-step degradation: integer-factor box downsample, then a
    JPEG encode/decode round trip at the spec's effective quality.

    Output dimensions are exactly floor(W/s) x floor(H/s). Deterministic for
    fixed encoder settings.
    """
    degraded, _ = degrade_to_jpeg(image, spec)
    return degraded


def crop(image: RasterImage, box: BoundingBox, padding: float = 0.0) -> RasterImage:
    """Extract the sub-image under ``box`` expanded by ``padding`` pixels.

    The padded box is intersected with the image bounds and rounded outward
    to integer pixels. Empty intersection raises ImageError.
    """
    x0 = math.floor(max(box.x_min - padding, 0.0))
    y0 = math.floor(max(box.y_min - padding, 0.0))
    x1 = math.ceil(min(box.x_max + padding, float(image.width)))
    y1 = math.ceil(min(box.y_max + padding, float(image.height)))
    if x0 >= x1 or y0 >= y1:
        raise ImageError(
            f"crop box {box} (padding {padding}) does not intersect "
            f"image {image.width}x{image.height}"
        )
    return RasterImage.from_array(np.ascontiguousarray(image.to_array()[y0:y1, x0:x1]))


# --- degradation runs -----------------------------------------------------------


def run_degrade(
    manifest: Manifest,
    spec: DegradeSpec,
    out_root: PathLike,
    manifest_name: str = "degraded.jsonl",
) -> tuple[Manifest, list[tuple[str, str]]]:
    """Degrade every sample image, writing low-res JPEGs plus a paired manifest.

    Each output record points at the degraded image with ``pair`` set to the
    original path, carrying reference text and labels through, so the output
    feeds PSNR scoring and low/high recognition comparisons directly.
    Returns (paired manifest, [(sample_id, error), ...]).
    """
    out_root = Path(out_root)
    images_dir = out_root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    degraded: list[Sample] = []
    failures: list[tuple[str, str]] = []
    for sample in manifest:
        try:
            image = read_image(sample.image_path)
            _, jpeg_bytes = degrade_to_jpeg(image, spec)
        except (OSError, ImageError) as exc:
            logger.warning("degrade failed for %s: %s", sample.id, exc)
            failures.append((sample.id, str(exc)))
            continue
        out_path = images_dir / f"{sample.id}.jpg"
        out_path.write_bytes(jpeg_bytes)
        degraded.append(Sample(
            id=sample.id,
            image_path=str(out_path),
            reference_text=sample.reference_text,
            labels_path=sample.labels_path,
            pair_path=sample.image_path,
        ))
    paired = Manifest(samples=tuple(degraded), split_name=f"{manifest.split_name}-degraded")
    save_manifest(paired, out_root / manifest_name)
    return paired, failures
