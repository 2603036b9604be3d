"""Core domain types: images, boxes, samples, and dataset manifests.

Everything here is immutable after construction and safe to share across
worker threads. Loaders are pure functions of file content.

Coordinate convention: origin top-left, x rightward, y downward. Boxes are
stored as real-valued corners (x_min, y_min, x_max, y_max) in pixel space.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .errors import ImageError, LabelError, ManifestError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ColorSpace(Enum):
    GRAY = "gray"
    RGB = "rgb"


_CHANNELS = {ColorSpace.GRAY: 1, ColorSpace.RGB: 3}


@dataclass(frozen=True)
class RasterImage:
    """8-bit raster image with row-major samples.

    ``pixel_data`` holds exactly ``width * height * channels`` bytes,
    interleaved per pixel for RGB.
    """

    width: int
    height: int
    channels: int
    color_space: ColorSpace
    pixel_data: bytes

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ImageError(f"image dimensions must be >= 1, got {self.width}x{self.height}")
        if _CHANNELS[self.color_space] != self.channels:
            raise ImageError(
                f"{self.color_space.value} images must have {_CHANNELS[self.color_space]} "
                f"channels, got {self.channels}"
            )
        expected = self.width * self.height * self.channels
        if len(self.pixel_data) != expected:
            raise ImageError(
                f"pixel buffer has {len(self.pixel_data)} bytes, expected {expected} "
                f"for {self.width}x{self.height}x{self.channels}"
            )

    @classmethod
    def from_array(cls, array: np.ndarray) -> "RasterImage":
        """Build from an (H, W) or (H, W, C) uint8 array, C in {1, 3}."""
        arr = np.asarray(array)
        if arr.dtype != np.uint8:
            raise ImageError(f"expected uint8 samples, got {arr.dtype}")
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ImageError(f"expected (H, W[, C]) with C in {{1, 3}}, got shape {arr.shape}")
        h, w, c = arr.shape
        space = ColorSpace.GRAY if c == 1 else ColorSpace.RGB
        return cls(width=w, height=h, channels=c, color_space=space,
                   pixel_data=np.ascontiguousarray(arr).tobytes())

    def to_array(self) -> np.ndarray:
        """Return a read-only (H, W, C) uint8 view over the pixel buffer."""
        arr = np.frombuffer(self.pixel_data, dtype=np.uint8)
        return arr.reshape(self.height, self.width, self.channels)

    def digest(self) -> str:
        """Content digest over dimensions, channel layout, and raw samples."""
        h = hashlib.sha256()
        h.update(f"{self.width}x{self.height}x{self.channels}:{self.color_space.value}:".encode())
        h.update(self.pixel_data)
        return h.hexdigest()


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned rectangle in image pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if min(self.x_min, self.y_min, self.x_max, self.y_max) < 0:
            raise ValueError(f"box corners must be non-negative: {self}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"zero-area or inverted box rejected: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def x_center(self) -> float:
        return (self.x_min + self.x_max) / 2.0

    @property
    def y_center(self) -> float:
        return (self.y_min + self.y_max) / 2.0


@dataclass(frozen=True)
class Detection:
    """Model-predicted region with class label and confidence."""

    box: BoundingBox
    class_id: int
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class GroundTruthBox:
    """Annotated reference region."""

    box: BoundingBox
    class_id: int


@dataclass(frozen=True)
class Sample:
    """One evaluation unit: an image plus whatever references exist for it.

    ``reference_text`` feeds WER/CER scoring, ``gt_boxes`` feeds detection
    scoring, and ``pair_path`` points at the high-resolution counterpart for
    PSNR pairs. ``labels_path`` is kept so manifests round-trip losslessly.
    """

    id: str
    image_path: str
    reference_text: Optional[str] = None
    gt_boxes: Optional[tuple[GroundTruthBox, ...]] = None
    pair_path: Optional[str] = None
    labels_path: Optional[str] = None


@dataclass(frozen=True)
class Manifest:
    """Ordered collection of samples with unique ids."""

    samples: tuple[Sample, ...]
    split_name: str = ""

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for sample in self.samples:
            if sample.id in seen:
                raise ManifestError(f"duplicate sample id {sample.id!r}")
            seen.add(sample.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}


# --- manifest file format ---------------------------------------------------
#
# UTF-8, one JSON record per line. Keys: id, image, and optionally text,
# labels (path to a YOLO label file), pair (path to the reference image).
# Canonical form writes keys in that order with compact separators.

_MANIFEST_KEYS = {"id", "image", "text", "labels", "pair"}


def load_manifest(path: PathLike, split_name: Optional[str] = None) -> Manifest:
    """Parse a line-delimited manifest file.

    Raises ManifestError naming the offending line for malformed records and
    for duplicate ids. Image files referenced by records are not checked here;
    they are resolved lazily at use.
    """
    path = Path(path)
    samples: list[Sample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid record: {exc}") from exc
            if not isinstance(record, dict):
                raise ManifestError(f"{path}:{lineno}: record must be an object")
            unknown = set(record) - _MANIFEST_KEYS
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
            if "id" not in record or "image" not in record:
                raise ManifestError(f"{path}:{lineno}: missing required key 'id' or 'image'")
            samples.append(Sample(
                id=str(record["id"]),
                image_path=str(record["image"]),
                reference_text=record.get("text"),
                pair_path=record.get("pair"),
                labels_path=record.get("labels"),
            ))
    name = split_name if split_name is not None else path.stem
    try:
        return Manifest(samples=tuple(samples), split_name=name)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def manifest_line(sample: Sample) -> str:
    """Canonical single-line serialization of one sample."""
    record: dict[str, str] = {"id": sample.id, "image": sample.image_path}
    if sample.reference_text is not None:
        record["text"] = sample.reference_text
    if sample.labels_path is not None:
        record["labels"] = sample.labels_path
    if sample.pair_path is not None:
        record["pair"] = sample.pair_path
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def save_manifest(manifest: Manifest, path: PathLike) -> None:
    """Write the canonical form: one compact record per line, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for sample in manifest:
            fh.write(manifest_line(sample) + "\n")


# --- YOLO label format --------------------------------------------------------


def parse_yolo_lines(
    lines: Iterable[str],
    image_width: int,
    image_height: int,
    source: str = "<labels>",
) -> tuple[list[GroundTruthBox], int]:
    """Convert ``class cx cy w h`` lines (normalized) to pixel-space boxes.

    Corners are clamped to [0, W] x [0, H]; boxes that collapse to zero area
    after clamping are dropped. Returns (boxes, dropped_count).
    """
    boxes: list[GroundTruthBox] = []
    dropped = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 5:
            raise LabelError(f"{source}:{lineno}: expected 5 fields, got {len(fields)}")
        try:
            class_id = int(fields[0])
            cx, cy, w, h = (float(f) for f in fields[1:])
        except ValueError as exc:
            raise LabelError(f"{source}:{lineno}: non-numeric field: {exc}") from exc
        x_min = max(0.0, min((cx - w / 2) * image_width, float(image_width)))
        x_max = max(0.0, min((cx + w / 2) * image_width, float(image_width)))
        y_min = max(0.0, min((cy - h / 2) * image_height, float(image_height)))
        y_max = max(0.0, min((cy + h / 2) * image_height, float(image_height)))
        if x_min >= x_max or y_min >= y_max:
            dropped += 1
            continue
        boxes.append(GroundTruthBox(
            box=BoundingBox(x_min, y_min, x_max, y_max), class_id=class_id))
    return boxes, dropped


def load_yolo_labels(
    label_path: PathLike, image_width: int, image_height: int
) -> list[GroundTruthBox]:
    """Load one YOLO-format label file as pixel-space ground-truth boxes."""
    path = Path(label_path)
    with open(path, encoding="utf-8") as fh:
        boxes, dropped = parse_yolo_lines(fh, image_width, image_height, source=str(path))
    if dropped:
        logger.warning("%s: dropped %d zero-area box(es) after clamping", path, dropped)
    return boxes


def yolo_line(box: GroundTruthBox, image_width: int, image_height: int) -> str:
    """Serialize a pixel-space box back to the normalized YOLO line format.

    Floats are written in shortest round-trip form so that re-parsing
    reproduces the box to within float rounding.
    """
    b = box.box
    cx = float((b.x_min + b.x_max) / 2 / image_width)
    cy = float((b.y_min + b.y_max) / 2 / image_height)
    w = float((b.x_max - b.x_min) / image_width)
    h = float((b.y_max - b.y_min) / image_height)
    return f"{box.class_id} {cx!r} {cy!r} {w!r} {h!r}"
