"""Detection scoring: IoU, greedy matching, average precision, dataset rollups.

AP uses 101-point interpolation (precision envelope sampled at recall
0.00, 0.01, ..., 1.00), the convention of the mAP@50:95 metric family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from ..errors import EvalError
from ..model import BoundingBox, Detection, GroundTruthBox

IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union area ratio; 0 for disjoint boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: Sequence[BoundingBox], boxes_b: Sequence[BoundingBox]) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in boxes_a])
    b = np.array([[c.x_min, c.y_min, c.x_max, c.y_max] for c in boxes_b])
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


@dataclass(frozen=True)
class MatchResult:
    """Greedy matching of one image's detections against its ground truth.

    ``order`` lists detection indices by descending confidence (input order
    breaks ties); ``tp`` and ``matched_gt`` align with ``order``.
    """

    order: tuple[int, ...]
    tp: tuple[bool, ...]
    matched_gt: tuple[Optional[int], ...]
    missed_gt: int


def _greedy_match(ious: np.ndarray, order: Sequence[int], iou_threshold: float) -> MatchResult:
    n_gts = ious.shape[1]
    taken = np.zeros(n_gts, dtype=bool)
    tp: list[bool] = []
    matched: list[Optional[int]] = []
    for det_idx in order:
        best_gt = -1
        best_iou = 0.0
        for gt_idx in range(n_gts):
            if taken[gt_idx]:
                continue
            value = ious[det_idx, gt_idx]
            if value >= iou_threshold and value > best_iou:
                best_iou = value
                best_gt = gt_idx
        if best_gt >= 0:
            taken[best_gt] = True
            tp.append(True)
            matched.append(best_gt)
        else:
            tp.append(False)
            matched.append(None)
    return MatchResult(
        order=tuple(order),
        tp=tuple(tp),
        matched_gt=tuple(matched),
        missed_gt=int(n_gts - taken.sum()),
    )


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    iou_threshold: float,
) -> MatchResult:
    """One-to-one greedy matching for a single image and class.

    Detections are taken in descending confidence (input order breaks ties);
    each claims the unmatched ground-truth box of highest IoU >= threshold,
    lowest GT index on IoU ties.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    ious = iou_matrix([d.box for d in dets], [g.box for g in gts])
    return _greedy_match(ious, order, iou_threshold)


def average_precision(flags: Sequence[bool], total_gt: int) -> float:
    """101-point interpolated AP from confidence-ordered TP/FP flags.

    ``flags`` must already be ordered by descending confidence across the
    whole split. Classes with no ground truth have no defined AP; callers
    skip them (ValueError here).
    """
    if total_gt < 1:
        raise ValueError("AP is undefined for total_gt == 0; skip the class instead")
    if len(flags) == 0:
        return 0.0
    arr = np.asarray(flags, dtype=bool)
    tp_cum = np.cumsum(arr)
    fp_cum = np.cumsum(~arr)
    precision = tp_cum / (tp_cum + fp_cum)
    # Envelope: max precision over all points with recall >= the sample point.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k/100 compared in integers: 100 * tp_cum >= k * total_gt.
    idx = np.searchsorted(100 * tp_cum, np.arange(101, dtype=np.int64) * total_gt, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return math.fsum(sampled.tolist()) / 101.0


@dataclass(frozen=True)
class DetectionScore:
    """Dataset-level detection metrics.

    ``map50_95`` is the arithmetic mean of ``per_threshold_ap`` over the ten
    IoU thresholds 0.50..0.95; ``precision``/``recall`` are reported at the
    confidence threshold maximizing F1 at IoU 0.50.
    """

    precision: float
    recall: float
    map50: float
    map50_95: float
    per_threshold_ap: dict[float, float]


def _sorted_flags(
    entries: list[tuple[float, int, bool]],
) -> np.ndarray:
    """Confidence-ordered TP flags from (confidence, sequence, tp) triples."""
    entries.sort(key=lambda e: (-e[0], e[1]))
    return np.array([e[2] for e in entries], dtype=bool)


def detection_score(
    all_dets: Mapping[str, Sequence[Detection]],
    all_gts: Mapping[str, Sequence[GroundTruthBox]],
) -> DetectionScore:
    """Score a whole split of per-image detections against ground truth.

    AP is computed per class per IoU threshold, averaged over classes (those
    with ground truth) and then thresholds. Images are visited in sorted key
    order so the global confidence sort is deterministic.
    """
    image_ids = sorted(set(all_dets) | set(all_gts))
    classes = sorted({g.class_id for img in image_ids for g in all_gts.get(img, ())})
    if not classes:
        raise EvalError("no ground-truth boxes; nothing to evaluate")

    # per class: confidence-ordered flags per threshold, plus flat (conf, tp@50).
    per_class_ap: dict[int, dict[float, float]] = {}
    f1_inputs: list[tuple[np.ndarray, np.ndarray, int]] = []  # (confs, tp50, total_gt)
    for class_id in classes:
        total_gt = 0
        per_threshold_entries: dict[float, list[tuple[float, int, bool]]] = {
            t: [] for t in IOU_THRESHOLDS
        }
        seq = 0
        conf_tp50: list[tuple[float, int, bool]] = []
        for img in image_ids:
            dets = [d for d in all_dets.get(img, ()) if d.class_id == class_id]
            gts = [g for g in all_gts.get(img, ()) if g.class_id == class_id]
            total_gt += len(gts)
            order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
            ious = iou_matrix([d.box for d in dets], [g.box for g in gts])
            for threshold in IOU_THRESHOLDS:
                result = _greedy_match(ious, order, threshold)
                for pos, det_idx in enumerate(result.order):
                    entry = (dets[det_idx].confidence, seq + det_idx, result.tp[pos])
                    per_threshold_entries[threshold].append(entry)
                    if threshold == 0.50:
                        conf_tp50.append(entry)
            seq += len(dets)
        if total_gt == 0:
            continue  # class absent from ground truth: skipped, not zeroed
        per_class_ap[class_id] = {
            t: average_precision(_sorted_flags(entries), total_gt)
            for t, entries in per_threshold_entries.items()
        }
        conf_tp50.sort(key=lambda e: (-e[0], e[1]))
        f1_inputs.append((
            np.array([e[0] for e in conf_tp50]),
            np.array([e[2] for e in conf_tp50], dtype=bool),
            total_gt,
        ))

    per_threshold_ap = {
        t: float(np.mean([per_class_ap[c][t] for c in per_class_ap])) for t in IOU_THRESHOLDS
    }
    map50_95 = float(np.mean(list(per_threshold_ap.values())))
    precision, recall = _best_f1_operating_point(f1_inputs)
    return DetectionScore(
        precision=precision,
        recall=recall,
        map50=per_threshold_ap[0.50],
        map50_95=map50_95,
        per_threshold_ap=per_threshold_ap,
    )


def _best_f1_operating_point(
    f1_inputs: list[tuple[np.ndarray, np.ndarray, int]],
) -> tuple[float, float]:
    """Scan observed confidences for the threshold maximizing F1 at IoU 0.50.

    TP/FP/FN aggregate across classes at each candidate threshold. Ties in F1
    resolve to the highest confidence threshold.
    """
    non_empty = [confs for confs, _, _ in f1_inputs if len(confs)]
    if not non_empty:
        return 0.0, 0.0  # ground truth exists but nothing was detected
    candidates = np.unique(np.concatenate(non_empty))
    total_gt = sum(n for _, _, n in f1_inputs)
    best = (-1.0, 0.0, 0.0)  # (f1, precision, recall)
    for threshold in candidates[::-1]:  # descending
        tp = fp = 0
        for confs, tp_flags, _ in f1_inputs:
            keep = confs >= threshold
            tp += int(np.count_nonzero(tp_flags & keep))
            fp += int(np.count_nonzero(~tp_flags & keep))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / total_gt
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        if f1 > best[0]:
            best = (f1, precision, recall)
    return best[1], best[2]
