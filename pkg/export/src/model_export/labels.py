"""Convert annotation exports into YOLO label files plus a dataset manifest.

Input is the annotation tool's JSON export: ``{"images": [{"file": ...,
"boxes": [{"class_id": ..., "x_min": ..., "y_min": ..., "x_max": ...,
"y_max": ...}]}]}`` with pixel-space corners. Output is one ``class cx cy w h``
label file per image (normalized floats in shortest round-trip form, matching
the pipeline's label format) and one manifest line per image.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

logger = logging.getLogger(__name__)


class LabelConversionError(Exception):
    """Malformed annotation export."""


@dataclass
class ConversionResult:
    manifest_path: str
    label_count: int = 0
    image_count: int = 0
    clamped_boxes: int = 0
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (file, reason)


def _normalized_line(class_id: int, corners: tuple[float, float, float, float],
                     width: int, height: int) -> tuple[str, bool]:
    """YOLO line for pixel corners, clamped to the image. Returns (line, clamped)."""
    x0, y0, x1, y1 = corners
    cx0 = min(max(x0, 0.0), float(width))
    cx1 = min(max(x1, 0.0), float(width))
    cy0 = min(max(y0, 0.0), float(height))
    cy1 = min(max(y1, 0.0), float(height))
    clamped = (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1)
    if cx0 >= cx1 or cy0 >= cy1:
        raise LabelConversionError(f"box {corners} collapses after clamping to {width}x{height}")
    cx = float((cx0 + cx1) / 2 / width)
    cy = float((cy0 + cy1) / 2 / height)
    w = float((cx1 - cx0) / width)
    h = float((cy1 - cy0) / height)
    return f"{int(class_id)} {cx!r} {cy!r} {w!r} {h!r}", clamped


def convert_labels(annotation_export: str, images_root: str, out_dir: str) -> ConversionResult:
    """Write label files and a manifest for every resolvable image.

    Images missing under ``images_root`` are listed in ``skipped`` and left
    out of the manifest; callers turn a non-empty skip list into a nonzero
    exit. Out-of-bounds boxes are clamped with a warning, mirroring the
    pipeline's ingestion rule.
    """
    export_path = Path(annotation_export)
    try:
        export = json.loads(export_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise LabelConversionError(f"cannot read annotation export {export_path}: {exc}") from exc
    if not isinstance(export, dict) or not isinstance(export.get("images"), list):
        raise LabelConversionError(f"{export_path}: missing top-level 'images' list")
    images = export["images"]

    root = Path(images_root)
    out = Path(out_dir)
    labels_dir = out / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.jsonl"

    result = ConversionResult(manifest_path=str(manifest_path))
    manifest_lines: list[str] = []
    for entry in images:
        rel = entry.get("file")
        if not rel:
            result.skipped.append(("<missing file key>", "record has no 'file'"))
            continue
        image_path = root / rel
        if not image_path.exists():
            logger.warning("skipping %s: image not found under %s", rel, root)
            result.skipped.append((rel, "image not found"))
            continue
        with Image.open(image_path) as img:
            width, height = img.size

        lines = []
        for box in entry.get("boxes", []):
            line, clamped = _normalized_line(
                int(box["class_id"]),
                (float(box["x_min"]), float(box["y_min"]),
                 float(box["x_max"]), float(box["y_max"])),
                width, height,
            )
            if clamped:
                logger.warning("clamped out-of-bounds box in %s", rel)
                result.clamped_boxes += 1
            lines.append(line)

        label_path = labels_dir / (Path(rel).stem + ".txt")
        label_path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
        record = {
            "id": Path(rel).stem,
            "image": str(image_path),
            "labels": str(label_path),
        }
        manifest_lines.append(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
        result.image_count += 1
        result.label_count += len(lines)

    manifest_path.write_text("".join(l + "\n" for l in manifest_lines), encoding="utf-8")
    if not manifest_lines:
        logger.warning("annotation export produced an empty manifest")
    return result
