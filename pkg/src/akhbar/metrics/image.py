"""Peak signal-to-noise ratio for 8-bit images."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..errors import ImageError
from ..model import ColorSpace, RasterImage

PEAK = 255.0

# ITU-R BT.601 luma weights.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)


class PsnrMode(Enum):
    RGB = "rgb"
    LUMA = "luma"


@dataclass(frozen=True)
class PsnrScore:
    """PSNR in decibels plus the underlying mean squared error.

    ``psnr_db`` is ``math.inf`` exactly when ``mse`` is zero.
    """

    psnr_db: float
    mse: float


def _luma_plane(image: RasterImage) -> np.ndarray:
    arr = image.to_array().astype(np.float64)
    if image.color_space is ColorSpace.GRAY:
        return arr[:, :, 0]
    return arr @ _LUMA_WEIGHTS


def psnr(reference: RasterImage, candidate: RasterImage, mode: PsnrMode = PsnrMode.RGB) -> PsnrScore:
    """PSNR of ``candidate`` against ``reference``.

    RGB mode compares every sample of dimension- and channel-matched images;
    LUMA mode first projects both onto the BT.601 luma plane. MSE accumulates
    in double precision.
    """
    ref_shape = (reference.height, reference.width, reference.channels)
    cand_shape = (candidate.height, candidate.width, candidate.channels)
    if (reference.width, reference.height) != (candidate.width, candidate.height):
        raise ImageError(f"dimension mismatch: reference {ref_shape} vs candidate {cand_shape}")

    if mode is PsnrMode.LUMA:
        a = _luma_plane(reference)
        b = _luma_plane(candidate)
    else:
        if reference.channels != candidate.channels:
            raise ImageError(
                f"channel mismatch in RGB mode: reference {ref_shape} vs candidate {cand_shape}"
            )
        a = reference.to_array().astype(np.float64)
        b = candidate.to_array().astype(np.float64)

    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PsnrScore(psnr_db=math.inf, mse=0.0)
    return PsnrScore(psnr_db=10.0 * math.log10(PEAK * PEAK / mse), mse=mse)
