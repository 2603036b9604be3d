"""Pure metric engines: text edit rates, image PSNR, and detection scoring."""

from .detection import (
    IOU_THRESHOLDS,
    DetectionScore,
    MatchResult,
    average_precision,
    detection_score,
    iou,
    match_detections,
)
from .image import PsnrMode, PsnrScore, psnr
from .text import (
    DEFAULT_POLICY,
    EditCounts,
    NormalizationPolicy,
    OcrScore,
    edit_counts,
    normalize_text,
    word_error_rate,
)

__all__ = [
    "IOU_THRESHOLDS",
    "DetectionScore",
    "MatchResult",
    "average_precision",
    "detection_score",
    "iou",
    "match_detections",
    "PsnrMode",
    "PsnrScore",
    "psnr",
    "DEFAULT_POLICY",
    "EditCounts",
    "NormalizationPolicy",
    "OcrScore",
    "edit_counts",
    "normalize_text",
    "word_error_rate",
]
