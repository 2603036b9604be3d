"""Benchmark evaluation and report emission.

OCR scores micro-average edit operations over included samples (refusals and
transport errors are excluded from the means but counted and reported).
Reports come in two byte-deterministic formats: MARKDOWN tables shaped like
the segmentation and recognition summaries, and a schema-versioned MACHINE
record stream. Floats render with three decimals, round-half-even; model rows
sort case-insensitively by name.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .errors import EvalError
from .metrics.detection import DetectionScore, detection_score
from .metrics.text import DEFAULT_POLICY, NormalizationPolicy, word_error_rate
from .model import Detection, GroundTruthBox, Manifest, PathLike, load_yolo_labels
from .recognize import RecognitionOutcome
from .superres import SrBenchResult

logger = logging.getLogger(__name__)

MACHINE_SCHEMA = "ocr-bench/1"

AGGREGATION_NOTES = (
    "aggregation=micro",
    "tokenization=whitespace-collapsed, punctuation attached",
    "char_unit=nfc-codepoints",
    "refusals=excluded-from-means",
)


class Tier(Enum):
    LOW = "low"
    HIGH = "high"


class ReportFormat(Enum):
    MACHINE = "machine"
    MARKDOWN = "markdown"


@dataclass(frozen=True)
class SampleOcrScore:
    sample_id: str
    wer: Optional[float]
    cer: Optional[float]
    refusal: bool
    transport_error: Optional[str]
    word_edits: int = 0
    word_refs: int = 0
    char_edits: int = 0
    char_refs: int = 0

    @property
    def included(self) -> bool:
        return not self.refusal and self.transport_error is None


@dataclass(frozen=True)
class OcrBenchResult:
    """One model's scores on one resolution tier.

    ``failed_flag`` is exactly ``refusal_rate > failure_threshold``; means are
    micro-averages over included samples and are None when nothing is usable.
    """

    model_name: str
    tier: Tier
    mean_wer: Optional[float]
    mean_cer: Optional[float]
    refusal_rate: float
    sample_count: int
    failed_flag: bool
    refusal_count: int
    transport_error_count: int
    included_count: int
    per_sample: tuple[SampleOcrScore, ...]
    failure_threshold: float = 0.5


def eval_ocr(
    manifest: Manifest,
    outcomes: Sequence[RecognitionOutcome],
    policy: NormalizationPolicy = DEFAULT_POLICY,
    failure_threshold: float = 0.5,
    tier: Tier = Tier.HIGH,
    model_name: Optional[str] = None,
) -> OcrBenchResult:
    """Score recognition outcomes against manifest reference texts.

    Every outcome must name a manifest sample that has reference text.
    Zero usable samples yields a diagnostic result (means None), not a crash.
    """
    references = {s.id: s.reference_text for s in manifest}
    per_sample: list[SampleOcrScore] = []
    word_edits = word_refs = char_edits = char_refs = 0
    refusals = transport_errors = 0

    for outcome in outcomes:
        if outcome.sample_id not in references:
            raise EvalError(f"outcome references unknown sample {outcome.sample_id!r}")
        reference = references[outcome.sample_id]
        if reference is None:
            raise EvalError(f"sample {outcome.sample_id!r} has no reference text")
        if outcome.transport_error is not None:
            transport_errors += 1
            per_sample.append(SampleOcrScore(
                outcome.sample_id, None, None, False, outcome.transport_error))
            continue
        if outcome.refusal:
            refusals += 1
            per_sample.append(SampleOcrScore(outcome.sample_id, None, None, True, None))
            continue
        score = word_error_rate(reference, outcome.text, policy)
        edits_w = score.substitutions + score.insertions + score.deletions
        edits_c = score.char_substitutions + score.char_insertions + score.char_deletions
        per_sample.append(SampleOcrScore(
            outcome.sample_id,
            score.wer,
            score.cer,
            False,
            None,
            word_edits=edits_w,
            word_refs=score.reference_token_count,
            char_edits=edits_c,
            char_refs=score.reference_char_count,
        ))
        word_edits += edits_w
        word_refs += score.reference_token_count
        char_edits += edits_c
        char_refs += score.reference_char_count

    sample_count = len(outcomes)
    refusal_rate = refusals / sample_count if sample_count else 0.0
    included = sample_count - refusals - transport_errors
    if included == 0:
        logger.warning("no usable samples: %d refusals, %d transport errors out of %d",
                       refusals, transport_errors, sample_count)
    name = model_name or (outcomes[0].model_name if outcomes else "unknown")
    return OcrBenchResult(
        model_name=name,
        tier=tier,
        mean_wer=word_edits / word_refs if included else None,
        mean_cer=char_edits / char_refs if included else None,
        refusal_rate=refusal_rate,
        sample_count=sample_count,
        failed_flag=refusal_rate > failure_threshold,
        refusal_count=refusals,
        transport_error_count=transport_errors,
        included_count=included,
        per_sample=tuple(per_sample),
        failure_threshold=failure_threshold,
    )


def eval_detection(
    predictions: Mapping[str, Sequence[Detection]],
    ground_truth: Manifest,
) -> DetectionScore:
    """Score a detections export against a manifest with label files."""
    gt_ids = {s.id for s in ground_truth}
    pred_ids = set(predictions)
    if gt_ids != pred_ids:
        missing = sorted(gt_ids - pred_ids)
        extra = sorted(pred_ids - gt_ids)
        raise EvalError(
            f"sample id mismatch: missing predictions for {missing[:10]}, "
            f"unknown prediction ids {extra[:10]}"
        )
    gts: dict[str, list[GroundTruthBox]] = {}
    for sample in ground_truth:
        if sample.gt_boxes is not None:
            gts[sample.id] = list(sample.gt_boxes)
        elif sample.labels_path is not None:
            from .imageops import image_size

            width, height = image_size(sample.image_path)
            gts[sample.id] = load_yolo_labels(sample.labels_path, width, height)
        else:
            raise EvalError(f"sample {sample.id!r} carries no ground-truth boxes")
    return detection_score(predictions, gts)


# --- tier comparison -------------------------------------------------------------------


@dataclass(frozen=True)
class TierComparison:
    """Paired low/high comparison for one model over one sample set."""

    model_name: str
    low: OcrBenchResult
    high: OcrBenchResult
    deltas: tuple[tuple[str, float], ...]  # (sample_id, high wer - low wer)
    mean_delta: Optional[float]
    improved: int
    regressed: int
    unchanged: int


def compare_tiers(low: OcrBenchResult, high: OcrBenchResult) -> TierComparison:
    """Pair per-sample WERs across tiers of the same model and sample set."""
    if low.model_name != high.model_name:
        raise EvalError(f"tier model mismatch: {low.model_name!r} vs {high.model_name!r}")
    low_ids = {s.sample_id for s in low.per_sample}
    high_ids = {s.sample_id for s in high.per_sample}
    if low_ids != high_ids:
        difference = sorted(low_ids.symmetric_difference(high_ids))
        raise EvalError(f"tier sample sets differ: {difference[:20]}")

    low_scores = {s.sample_id: s for s in low.per_sample}
    deltas: list[tuple[str, float]] = []
    for high_score in high.per_sample:
        low_score = low_scores[high_score.sample_id]
        if high_score.included and low_score.included:
            deltas.append((high_score.sample_id, high_score.wer - low_score.wer))
    mean_delta = sum(d for _, d in deltas) / len(deltas) if deltas else None
    return TierComparison(
        model_name=low.model_name,
        low=low,
        high=high,
        deltas=tuple(deltas),
        mean_delta=mean_delta,
        improved=sum(1 for _, d in deltas if d < 0),
        regressed=sum(1 for _, d in deltas if d > 0),
        unchanged=sum(1 for _, d in deltas if d == 0),
    )


# --- rendering ----------------------------------------------------------------------------


def _fmt(value: Optional[float], failed: bool = False) -> str:
    if failed:
        return "Fail"
    if value is None:
        return "n/a"
    return f"{value:.3f}"


def _model_sort_key(name: str) -> tuple[str, str]:
    return (name.lower(), name)


def render_detection_report(
    scores: Mapping[str, DetectionScore], fmt: ReportFormat
) -> str:
    """Task-per-column table of detection metrics (metric rows)."""
    tasks = sorted(scores)
    if fmt is ReportFormat.MACHINE:
        lines = []
        for task in tasks:
            s = scores[task]
            lines.append(json.dumps({
                "schema": MACHINE_SCHEMA,
                "kind": "detection",
                "task": task,
                "precision": s.precision,
                "recall": s.recall,
                "map50": s.map50,
                "map50_95": s.map50_95,
                "per_threshold_ap": {f"{t:.2f}": ap for t, ap in sorted(s.per_threshold_ap.items())},
            }, ensure_ascii=False, separators=(",", ":"), sort_keys=True))
        return "\n".join(lines) + "\n" if lines else ""

    header = "| Metric | " + " | ".join(task.capitalize() for task in tasks) + " |"
    divider = "| --- |" + " --- |" * len(tasks)
    rows = [
        ("Precision", [scores[t].precision for t in tasks]),
        ("Recall", [scores[t].recall for t in tasks]),
        ("mAP@50", [scores[t].map50 for t in tasks]),
        ("mAP@50:95", [scores[t].map50_95 for t in tasks]),
    ]
    lines = ["# Segmentation scores", "", header, divider]
    for label, values in rows:
        lines.append("| " + label + " | " + " | ".join(_fmt(v) for v in values) + " |")
    return "\n".join(lines) + "\n"


def render_ocr_report(results: Sequence[OcrBenchResult], fmt: ReportFormat) -> str:
    """Model-per-row grid of WER/CER for the low and high tiers."""
    if fmt is ReportFormat.MACHINE:
        lines = []
        for result in sorted(results, key=lambda r: (_model_sort_key(r.model_name), r.tier.value)):
            lines.append(json.dumps({
                "schema": MACHINE_SCHEMA,
                "kind": "ocr",
                "model": result.model_name,
                "tier": result.tier.value,
                "mean_wer": result.mean_wer,
                "mean_cer": result.mean_cer,
                "refusal_rate": result.refusal_rate,
                "sample_count": result.sample_count,
                "failed": result.failed_flag,
                "included_count": result.included_count,
                "notes": list(AGGREGATION_NOTES),
            }, ensure_ascii=False, separators=(",", ":"), sort_keys=True))
        return "\n".join(lines) + "\n" if lines else ""

    by_model: dict[str, dict[Tier, OcrBenchResult]] = {}
    for result in results:
        by_model.setdefault(result.model_name, {})[result.tier] = result
    lines = [
        "# Recognition scores",
        "",
        "| Model | Low-Res WER | Low-Res CER | High-Res WER | High-Res CER |",
        "| --- | --- | --- | --- | --- |",
    ]
    for model in sorted(by_model, key=_model_sort_key):
        tiers = by_model[model]
        cells = []
        for tier in (Tier.LOW, Tier.HIGH):
            result = tiers.get(tier)
            if result is None:
                cells.extend(["n/a", "n/a"])
            else:
                cells.append(_fmt(result.mean_wer, result.failed_flag))
                cells.append(_fmt(result.mean_cer, result.failed_flag))
        lines.append("| " + model + " | " + " | ".join(cells) + " |")
    lines.extend(["", "Aggregation: micro-averaged over included samples; refusals excluded."])
    return "\n".join(lines) + "\n"


def render_comparison_report(
    comparisons: Sequence[TierComparison], fmt: ReportFormat
) -> str:
    """Per-model low-to-high transitions, with Fail cells for failed tiers."""
    ordered = sorted(comparisons, key=lambda c: _model_sort_key(c.model_name))
    if fmt is ReportFormat.MACHINE:
        lines = []
        for comp in ordered:
            lines.append(json.dumps({
                "schema": MACHINE_SCHEMA,
                "kind": "tier_comparison",
                "model": comp.model_name,
                "low_wer": comp.low.mean_wer,
                "low_failed": comp.low.failed_flag,
                "high_wer": comp.high.mean_wer,
                "high_failed": comp.high.failed_flag,
                "mean_delta_wer": comp.mean_delta,
                "improved": comp.improved,
                "regressed": comp.regressed,
                "unchanged": comp.unchanged,
            }, ensure_ascii=False, separators=(",", ":"), sort_keys=True))
        return "\n".join(lines) + "\n" if lines else ""

    lines = [
        "# Super-resolution impact",
        "",
        "| Model | WER low → high | CER low → high | Mean ΔWER | Improved | Regressed | Unchanged |",
        "| --- | --- | --- | --- | --- | --- | --- |",
    ]
    for comp in ordered:
        wer_cell = (
            _fmt(comp.low.mean_wer, comp.low.failed_flag)
            + " → "
            + _fmt(comp.high.mean_wer, comp.high.failed_flag)
        )
        cer_cell = (
            _fmt(comp.low.mean_cer, comp.low.failed_flag)
            + " → "
            + _fmt(comp.high.mean_cer, comp.high.failed_flag)
        )
        lines.append(
            f"| {comp.model_name} | {wer_cell} | {cer_cell} | {_fmt(comp.mean_delta)} "
            f"| {comp.improved} | {comp.regressed} | {comp.unchanged} |"
        )
    return "\n".join(lines) + "\n"


def render_psnr_report(result: SrBenchResult, fmt: ReportFormat) -> str:
    if fmt is ReportFormat.MACHINE:
        record = {
            "schema": MACHINE_SCHEMA,
            "kind": "psnr",
            "pair_count": result.pair_count,
            "mean_psnr_db": result.mean_psnr_db,
            "exact_count": result.exact_count,
            "failures": [list(f) for f in result.failures],
        }
        return json.dumps(record, ensure_ascii=False, separators=(",", ":"), sort_keys=True) + "\n"
    lines = ["# Super-resolution PSNR", ""]
    if result.all_exact:
        lines.append(f"All {result.pair_count} pairs are exact matches (infinite PSNR).")
    else:
        mean = "n/a" if result.mean_psnr_db is None else f"{result.mean_psnr_db:.2f} dB"
        lines.append(f"Mean PSNR over {result.pair_count - result.exact_count} finite pairs: {mean}.")
        if result.exact_count:
            lines.append(f"Exact pairs (infinite PSNR): {result.exact_count}.")
    if result.failures:
        lines.append(f"Failed pairs: {len(result.failures)}.")
    return "\n".join(lines) + "\n"


def emit_report(rendered: str, path: Optional[PathLike] = None) -> str:
    """Write a rendered report to disk (if a path is given) and return it."""
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(rendered, encoding="utf-8")
    return rendered
