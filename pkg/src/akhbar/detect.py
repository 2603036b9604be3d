"""Region detection: backend inference, raw-output decoding, NMS, reading order.

Backends stay thin. A neural backend only maps a letterboxed input tensor to
raw candidate rows ``(cx, cy, w, h, class scores...)``; decoding back to image
coordinates, confidence filtering, and non-maximum suppression all live here.
A replay backend serves finished detections recorded from a previous run,
keyed by image content digest, so the pipeline is testable without weights.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import BackendError, FixtureMissError, ManifestError
from .imageops import ResizeKernel, resize
from .metrics.detection import iou_matrix
from .model import BoundingBox, Detection, PathLike, RasterImage

logger = logging.getLogger(__name__)

LETTERBOX_FILL = 114  # neutral gray, the YOLO-family convention


class DetectorTask(Enum):
    ARTICLE = "article"
    COLUMN = "column"


@dataclass(frozen=True)
class DetectorConfig:
    task: DetectorTask
    model_path: Optional[str] = None
    input_size: int = 640
    confidence_threshold: float = 0.25
    nms_iou_threshold: float = 0.45

    def __post_init__(self) -> None:
        if self.input_size % 32 != 0 or self.input_size < 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        for name in ("confidence_threshold", "nms_iou_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


# --- letterbox geometry ---------------------------------------------------------


@dataclass(frozen=True)
class LetterboxMapping:
    """Affine map between original image and square letterboxed coordinates."""

    scale_x: float
    scale_y: float
    pad_x: float
    pad_y: float

    def to_letterbox(self, x: float, y: float) -> tuple[float, float]:
        return x * self.scale_x + self.pad_x, y * self.scale_y + self.pad_y

    def to_original(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.pad_x) / self.scale_x, (y - self.pad_y) / self.scale_y


def letterbox_mapping(width: int, height: int, size: int) -> LetterboxMapping:
    ratio = min(size / width, size / height)
    new_w = max(1, round(width * ratio))
    new_h = max(1, round(height * ratio))
    return LetterboxMapping(
        scale_x=new_w / width,
        scale_y=new_h / height,
        pad_x=(size - new_w) / 2.0,
        pad_y=(size - new_h) / 2.0,
    )


def letterbox_image(image: RasterImage, size: int) -> tuple[np.ndarray, LetterboxMapping]:
    """Aspect-preserving resize onto a gray size x size canvas.

    Returns a float32 (3, size, size) tensor scaled to [0, 1] plus the
    coordinate mapping.
    """
    mapping = letterbox_mapping(image.width, image.height, size)
    new_w = round(image.width * mapping.scale_x)
    new_h = round(image.height * mapping.scale_y)
    resized = resize(image, new_w, new_h, ResizeKernel.BILINEAR).to_array()
    if resized.shape[2] == 1:
        resized = np.repeat(resized, 3, axis=2)
    canvas = np.full((size, size, 3), LETTERBOX_FILL, dtype=np.uint8)
    x0, y0 = int(mapping.pad_x), int(mapping.pad_y)
    canvas[y0 : y0 + new_h, x0 : x0 + new_w] = resized
    return canvas.transpose(2, 0, 1).astype(np.float32) / 255.0, mapping


# --- backends -------------------------------------------------------------------


class NeuralDetector:
    """Runs a TorchScript detection model over letterboxed inputs.

    The model must accept a float32 (1, 3, S, S) tensor in [0, 1] and produce
    candidate rows ``(cx, cy, w, h, class scores...)`` in letterbox pixel
    space, shaped (N, 4+C) or (1, N, 4+C).
    """

    emits_final = False

    def __init__(self, model_path: PathLike):
        try:
            import torch
        except ImportError as exc:
            raise BackendError("neural detector requires torch (install the 'neural' extra)") from exc
        self._torch = torch
        try:
            self._model = torch.jit.load(str(model_path), map_location="cpu")
        except (RuntimeError, OSError, ValueError) as exc:
            raise BackendError(f"cannot load detector model {model_path}: {exc}") from exc
        self._model.eval()

    def raw_rows(self, chw: np.ndarray, config: DetectorConfig) -> np.ndarray:
        torch = self._torch
        batch = torch.from_numpy(chw[None])
        try:
            with torch.no_grad():
                out = self._model(batch)
        except RuntimeError as exc:
            raise BackendError(
                f"detector inference failed for input {tuple(batch.shape)}: {exc}"
            ) from exc
        rows = out.detach().cpu().numpy()
        if rows.ndim == 3 and rows.shape[0] == 1:
            rows = rows[0]
        if rows.ndim != 2 or rows.shape[1] < 5:
            raise BackendError(
                f"detector output shape {rows.shape} does not match the "
                f"(N, 4+classes) decoding contract"
            )
        return rows


class ReplayDetector:
    """Serves recorded detections keyed by (image digest, task)."""

    emits_final = True

    def __init__(self, fixture_path: PathLike):
        self._path = str(fixture_path)
        self._index: dict[tuple[str, str], list[Detection]] = {}
        for record in _read_jsonl(fixture_path):
            key = (record["image_digest"], record["task"])
            self._index[key] = [_detection_from_record(d) for d in record["detections"]]

    def lookup(self, digest: str, task: DetectorTask) -> list[Detection]:
        key = (digest, task.value)
        if key not in self._index:
            raise FixtureMissError(
                f"no recorded {task.value} detections for digest {digest[:16]}... "
                f"in {self._path}"
            )
        return list(self._index[key])


# --- decode + NMS ----------------------------------------------------------------


def decode_raw_rows(
    rows: np.ndarray,
    mapping: LetterboxMapping,
    image_width: int,
    image_height: int,
    confidence_threshold: float,
) -> list[Detection]:
    """Raw candidate rows -> thresholded detections in original coordinates."""
    detections: list[Detection] = []
    for row in rows:
        cx, cy, w, h = (float(v) for v in row[:4])
        scores = row[4:]
        class_id = int(np.argmax(scores))
        confidence = float(scores[class_id])
        if confidence < confidence_threshold:
            continue
        x0, y0 = mapping.to_original(cx - w / 2, cy - h / 2)
        x1, y1 = mapping.to_original(cx + w / 2, cy + h / 2)
        x0 = min(max(x0, 0.0), image_width)
        x1 = min(max(x1, 0.0), image_width)
        y0 = min(max(y0, 0.0), image_height)
        y1 = min(max(y1, 0.0), image_height)
        if x0 >= x1 or y0 >= y1:
            continue
        detections.append(Detection(
            box=BoundingBox(x0, y0, x1, y1),
            class_id=class_id,
            confidence=min(confidence, 1.0),
        ))
    return detections


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Class-wise greedy suppression of boxes overlapping a kept box with
    IoU strictly above the threshold."""
    kept: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for det in sorted(detections, key=lambda d: -d.confidence):
        by_class.setdefault(det.class_id, []).append(det)
    for dets in by_class.values():
        ious = iou_matrix([d.box for d in dets], [d.box for d in dets])
        suppressed = np.zeros(len(dets), dtype=bool)
        for i in range(len(dets)):
            if suppressed[i]:
                continue
            kept.append(dets[i])
            suppressed |= ious[i] > iou_threshold
    return kept


def detect_regions(
    image: RasterImage, backend, config: DetectorConfig
) -> list[Detection]:
    """Run one image through a detector backend and post-process.

    Neural path: letterbox, infer, decode to original coordinates, drop
    candidates under the confidence threshold, class-wise NMS. Replay path:
    recorded detections verbatim. Either way the result is sorted by
    descending confidence (stable).
    """
    if getattr(backend, "emits_final", False):
        detections = backend.lookup(image.digest(), config.task)
    else:
        chw, mapping = letterbox_image(image, config.input_size)
        rows = backend.raw_rows(chw, config)
        candidates = decode_raw_rows(
            rows, mapping, image.width, image.height, config.confidence_threshold
        )
        detections = nms(candidates, config.nms_iou_threshold)
    return sorted(detections, key=lambda d: -d.confidence)


# --- reading order ----------------------------------------------------------------


def _vertical_overlap_fraction(a: BoundingBox, b: BoundingBox) -> float:
    overlap = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    shorter = min(a.height, b.height)
    return overlap / shorter if shorter > 0 else 0.0


def reading_order(detections: Sequence[Detection], task: DetectorTask) -> list[Detection]:
    """Order regions the way an Urdu page is read.

    Columns go strictly right-to-left by horizontal center (top-to-bottom on
    ties). Articles are clustered into rows by vertical overlap of at least
    half the shorter box's height; rows run top-to-bottom, and each row runs
    right-to-left. Always a permutation of the input.
    """
    if task is DetectorTask.COLUMN:
        return sorted(detections, key=lambda d: (-d.box.x_center, d.box.y_center))

    rows: list[list[Detection]] = []
    for det in sorted(detections, key=lambda d: (d.box.y_min, -d.box.x_center)):
        for row in rows:
            if any(_vertical_overlap_fraction(det.box, member.box) >= 0.5 for member in row):
                row.append(det)
                break
        else:
            rows.append([det])
    rows.sort(key=lambda row: min(m.box.y_min for m in row))
    ordered: list[Detection] = []
    for row in rows:
        ordered.extend(sorted(row, key=lambda d: (-d.box.x_center, d.box.y_center)))
    return ordered


# --- fixture and export files ------------------------------------------------------


def _read_jsonl(path: PathLike) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid record: {exc}") from exc
    return records


def _detection_to_record(det: Detection) -> dict:
    return {
        "x_min": det.box.x_min,
        "y_min": det.box.y_min,
        "x_max": det.box.x_max,
        "y_max": det.box.y_max,
        "class_id": det.class_id,
        "confidence": det.confidence,
    }


def _detection_from_record(record: dict) -> Detection:
    return Detection(
        box=BoundingBox(record["x_min"], record["y_min"], record["x_max"], record["y_max"]),
        class_id=int(record["class_id"]),
        confidence=float(record["confidence"]),
    )


def write_detection_fixture(
    path: PathLike, entries: Sequence[tuple[str, DetectorTask, Sequence[Detection]]]
) -> None:
    """Write (image_digest, task, detections) entries as a replay fixture."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for digest, task, detections in entries:
            record = {
                "image_digest": digest,
                "task": task.value,
                "detections": [_detection_to_record(d) for d in detections],
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")


def write_detections_export(
    path: PathLike,
    entries: Sequence[tuple[str, str, DetectorTask, Sequence[Detection]]],
) -> None:
    """Write (sample_id, image_digest, task, detections) evaluation exports."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for sample_id, digest, task, detections in entries:
            record = {
                "sample_id": sample_id,
                "image_digest": digest,
                "task": task.value,
                "detections": [_detection_to_record(d) for d in detections],
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")


def load_detections_export(path: PathLike) -> dict[str, list[Detection]]:
    """Read an export file back as {sample_id: detections}."""
    out: dict[str, list[Detection]] = {}
    for record in _read_jsonl(path):
        out[record["sample_id"]] = [_detection_from_record(d) for d in record["detections"]]
    return out
