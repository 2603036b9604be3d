"""Command-line entry point: every capability as one subcommand.

Exit codes: 0 full success, 1 per-sample failures occurred, 2 configuration
or usage errors. Human diagnostics go to stderr; machine output goes to
files, or to stdout when ``--stdout`` is passed. Flags override config-file
values, which override built-in defaults; the effective config digest is
printed at run start.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click

from . import __version__, bench
from .bench import ReportFormat, Tier
from .detect import (
    DetectorConfig,
    DetectorTask,
    NeuralDetector,
    ReplayDetector,
    detect_regions,
    load_detections_export,
    write_detections_export,
)
from .errors import AkhbarError, ConfigError, EvalError
from .imageops import DegradeSpec, read_image, run_degrade, write_image
from .metrics.image import PsnrMode
from .model import load_manifest
from .pipeline import config_digest, load_pipeline_config, run_pipeline
from .recognize import (
    ApiTranscriber,
    ReplayTranscriber,
    ResponseCache,
    save_outcomes,
    load_outcomes,
)
from .superres import BicubicUpscaler, NeuralUpscaler, ReplayUpscaler, UpscalerConfig, score_sr_pairs, upscale

logger = logging.getLogger(__name__)


class JsonlEventLog:
    """Per-sample structured events on stderr, enabled by ``--log jsonl``."""

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def emit(self, **event) -> None:
        if self.enabled:
            click.echo(json.dumps(event, ensure_ascii=False, sort_keys=True), err=True)


def _echo_config(name: str, payload: dict) -> None:
    digest = hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str).encode()
    ).hexdigest()
    click.echo(f"{name}: effective config digest {digest[:16]}", err=True)


def _finish(failure_count: int) -> None:
    if failure_count:
        click.echo(f"completed with {failure_count} per-sample failure(s)", err=True)
        sys.exit(1)


@click.group()
@click.version_option(version=__version__)
@click.option("--log", "log_format", type=click.Choice(["text", "jsonl"]), default="text",
              help="Diagnostic log format on stderr.")
@click.pass_context
def main(ctx: click.Context, log_format: str) -> None:
    """Batch OCR pipeline and benchmark harness for newspaper scans."""
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    ctx.obj = JsonlEventLog(enabled=log_format == "jsonl")


def _wrap_errors(fn):
    """Map package errors to the documented exit codes."""
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, EvalError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except AkhbarError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--scale", default=4, show_default=True, help="Downsampling factor.")
@click.option("--quality-reduction", default=30, show_default=True,
              help="JPEG quality points subtracted from the base quality.")
@click.option("--base-quality", default=100, show_default=True)
@click.pass_obj
@_wrap_errors
def degrade(events: JsonlEventLog, manifest_path: str, out_dir: str,
            scale: int, quality_reduction: int, base_quality: int) -> None:
    """Degrade manifest images and write a paired low/high manifest."""
    spec = DegradeSpec(scale_factor=scale, quality_reduction=quality_reduction,
                       base_quality=base_quality)
    _echo_config("degrade", {"spec": vars(spec), "manifest": manifest_path, "out": out_dir})
    manifest = load_manifest(manifest_path)
    paired, failures = run_degrade(manifest, spec, out_dir)
    for sample_id, error in failures:
        events.emit(event="degrade_failure", sample_id=sample_id, error=error)
    click.echo(f"degraded {len(paired)} image(s) into {out_dir}", err=True)
    _finish(len(failures))


def _detector_backend(backend: str, model: Optional[str], fixture: Optional[str]):
    if backend == "replay":
        if not fixture:
            raise ConfigError("--backend replay requires --fixture")
        return ReplayDetector(fixture)
    if not model:
        raise ConfigError("--backend neural requires --model")
    return NeuralDetector(model)


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--task", type=click.Choice(["article", "column"]), required=True)
@click.option("--backend", type=click.Choice(["neural", "replay"]), default="replay",
              show_default=True)
@click.option("--model", type=click.Path(exists=True), help="TorchScript detector model.")
@click.option("--fixture", type=click.Path(exists=True), help="Replay fixture file.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--input-size", default=640, show_default=True)
@click.option("--confidence", default=0.25, show_default=True)
@click.option("--nms-iou", default=0.45, show_default=True)
@click.pass_obj
@_wrap_errors
def segment(events: JsonlEventLog, manifest_path: str, task: str, backend: str,
            model: Optional[str], fixture: Optional[str], out_path: str,
            input_size: int, confidence: float, nms_iou: float) -> None:
    """Detect article or column regions and export them for evaluation."""
    config = DetectorConfig(
        task=DetectorTask(task), model_path=model, input_size=input_size,
        confidence_threshold=confidence, nms_iou_threshold=nms_iou,
    )
    _echo_config("segment", {"task": task, "backend": backend, "model": model,
                             "fixture": fixture, "input_size": input_size,
                             "confidence": confidence, "nms_iou": nms_iou})
    detector = _detector_backend(backend, model, fixture)
    manifest = load_manifest(manifest_path)
    entries = []
    failures = 0
    for sample in manifest:
        try:
            image = read_image(sample.image_path)
            detections = detect_regions(image, detector, config)
        except AkhbarError as exc:
            failures += 1
            events.emit(event="segment_failure", sample_id=sample.id, error=str(exc))
            click.echo(f"{sample.id}: {exc}", err=True)
            continue
        events.emit(event="segmented", sample_id=sample.id, detections=len(detections))
        entries.append((sample.id, image.digest(), config.task, detections))
    write_detections_export(out_path, entries)
    click.echo(f"wrote {len(entries)} detection record(s) to {out_path}", err=True)
    _finish(failures)


def _upscaler_backend(backend: str, model: Optional[str], fixture: Optional[str]):
    if backend == "bicubic":
        return BicubicUpscaler()
    if backend == "replay":
        if not fixture:
            raise ConfigError("--backend replay requires --fixture")
        return ReplayUpscaler(fixture)
    if not model:
        raise ConfigError("--backend neural requires --model")
    return NeuralUpscaler(model)


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--backend", type=click.Choice(["neural", "replay", "bicubic"]),
              default="bicubic", show_default=True)
@click.option("--model", type=click.Path(exists=True), help="TorchScript upscaler model.")
@click.option("--fixture", type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--scale", default=4, show_default=True)
@click.option("--tile-size", default=256, show_default=True)
@click.option("--tile-overlap", default=16, show_default=True)
@click.pass_obj
@_wrap_errors
def enhance(events: JsonlEventLog, manifest_path: str, backend: str, model: Optional[str],
            fixture: Optional[str], out_dir: str, scale: int, tile_size: int,
            tile_overlap: int) -> None:
    """Super-resolve manifest images; outputs pair back to their sources."""
    config = UpscalerConfig(scale=scale, model_path=model,
                            tile_size=tile_size, tile_overlap=tile_overlap)
    _echo_config("enhance", {"backend": backend, "scale": scale, "model": model,
                             "tile_size": tile_size, "tile_overlap": tile_overlap})
    upscaler = _upscaler_backend(backend, model, fixture)
    manifest = load_manifest(manifest_path)
    out_root = Path(out_dir)
    from .model import Manifest, Sample, save_manifest

    enhanced = []
    failures = 0
    for sample in manifest:
        try:
            image = read_image(sample.image_path)
            result = upscale(image, upscaler, config)
        except AkhbarError as exc:
            failures += 1
            events.emit(event="enhance_failure", sample_id=sample.id, error=str(exc))
            click.echo(f"{sample.id}: {exc}", err=True)
            continue
        out_path = out_root / "images" / f"{sample.id}.png"
        write_image(result, out_path)
        events.emit(event="enhanced", sample_id=sample.id)
        enhanced.append(Sample(id=sample.id, image_path=str(out_path),
                               reference_text=sample.reference_text,
                               pair_path=sample.pair_path or sample.image_path))
    save_manifest(Manifest(samples=tuple(enhanced), split_name=manifest.split_name),
                  out_root / "enhanced.jsonl")
    click.echo(f"enhanced {len(enhanced)} image(s) into {out_dir}", err=True)
    _finish(failures)


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--backend", type=click.Choice(["api", "replay"]), default="replay",
              show_default=True)
@click.option("--fixture", type=click.Path(exists=True), help="Replay fixture file.")
@click.option("--provider-config", type=click.Path(exists=True),
              help="TOML file with a [recognizer] section for the api backend.")
@click.option("--cache", "cache_dir", type=click.Path(), help="Response cache directory.")
@click.pass_obj
@_wrap_errors
def recognize(events: JsonlEventLog, manifest_path: str, out_path: str, backend: str,
              fixture: Optional[str], provider_config: Optional[str],
              cache_dir: Optional[str]) -> None:
    """Transcribe each manifest image as one segment."""
    if backend == "replay":
        if not fixture:
            raise ConfigError("--backend replay requires --fixture")
        transcriber = ReplayTranscriber(fixture)
    else:
        if not provider_config:
            raise ConfigError("--backend api requires --provider-config")
        from .pipeline import _recognizer_stage, tomllib  # same parsing as the pipeline config

        with open(provider_config, "rb") as fh:
            stage = _recognizer_stage(tomllib.load(fh).get("recognizer", {}))
        if stage.provider is None:
            raise ConfigError(f"{provider_config} has no [recognizer.provider] section")
        cache = ResponseCache(cache_dir) if cache_dir else (
            ResponseCache(stage.cache_dir) if stage.cache_dir else None)
        transcriber = ApiTranscriber(stage.provider, stage.profile, cache)
    _echo_config("recognize", {"backend": backend, "fixture": fixture,
                               "provider_config": provider_config, "cache": cache_dir})
    manifest = load_manifest(manifest_path)
    outcomes = []
    failures = 0
    for sample in manifest:
        try:
            image = read_image(sample.image_path)
            outcome = transcriber.transcribe(image, sample_id=sample.id)
        except AkhbarError as exc:
            failures += 1
            events.emit(event="recognize_failure", sample_id=sample.id, error=str(exc))
            click.echo(f"{sample.id}: {exc}", err=True)
            continue
        if outcome.transport_error:
            failures += 1
        events.emit(event="recognized", sample_id=sample.id, refusal=outcome.refusal,
                    from_cache=outcome.from_cache)
        outcomes.append(outcome)
    save_outcomes(outcomes, out_path)
    click.echo(f"wrote {len(outcomes)} outcome(s) to {out_path}", err=True)
    _finish(failures)


def _parse_set_overrides(pairs: tuple[str, ...]) -> dict:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[key.strip()] = value
    return overrides


@main.command(name="pipeline")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", type=click.Path(exists=True),
              help="Overrides the manifest named in the config file.")
@click.option("--workers", type=int, help="Override worker count.")
@click.option("--output-root", type=click.Path(), help="Override output directory.")
@click.option("--set", "set_overrides", multiple=True,
              help="Override any config key: --set upscaler.scale=2")
@click.pass_obj
@_wrap_errors
def pipeline_cmd(events: JsonlEventLog, config_path: str, manifest_path: Optional[str],
                 workers: Optional[int], output_root: Optional[str],
                 set_overrides: tuple[str, ...]) -> None:
    """Run the four-stage pipeline over a manifest."""
    overrides = _parse_set_overrides(set_overrides)
    if workers is not None:
        overrides["workers"] = workers
    if output_root is not None:
        overrides["output_root"] = output_root
    if manifest_path is not None:
        overrides["manifest"] = manifest_path
    from .pipeline import tomllib

    with open(config_path, "rb") as fh:
        manifest_from_config = tomllib.load(fh).get("manifest")
    effective_manifest = overrides.pop("manifest", None) or manifest_from_config
    if not effective_manifest:
        raise ConfigError("no manifest: pass --manifest or set 'manifest' in the config")
    config = load_pipeline_config(config_path, overrides)
    click.echo(f"pipeline: effective config digest {config_digest(config)[:16]}", err=True)
    manifest = load_manifest(effective_manifest)
    records = run_pipeline(manifest, config)
    failures = 0
    for record in records:
        events.emit(event="sample_done", sample_id=record.sample_id,
                    articles=len(record.articles), failures=len(record.failures))
        failures += 1 if record.failures else 0
    click.echo(f"pipeline wrote {len(records)} record(s) to {config.output_root}", err=True)
    _finish(failures)


def _report_out(rendered: str, out_path: Optional[str], to_stdout: bool) -> None:
    if to_stdout or out_path is None:
        click.echo(rendered, nl=False)
    if out_path is not None:
        bench.emit_report(rendered, out_path)
        click.echo(f"wrote report to {out_path}", err=True)


@main.command(name="eval-det")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True))
@click.option("--task", default="article", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["markdown", "machine"]),
              default="markdown", show_default=True)
@click.option("--out", "out_path", type=click.Path())
@click.option("--stdout", "to_stdout", is_flag=True, help="Also print the report to stdout.")
@_wrap_errors
def eval_det(pred_path: str, ref_path: str, task: str, fmt: str,
             out_path: Optional[str], to_stdout: bool) -> None:
    """Score a detections export against manifest ground truth."""
    _echo_config("eval-det", {"pred": pred_path, "ref": ref_path, "task": task})
    predictions = load_detections_export(pred_path)
    manifest = load_manifest(ref_path)
    score = bench.eval_detection(predictions, manifest)
    rendered = bench.render_detection_report({task: score}, ReportFormat(fmt))
    _report_out(rendered, out_path, to_stdout)


@main.command(name="eval-ocr")
@click.option("--hyp", "hyp_path", required=True, type=click.Path(exists=True),
              help="Recognition outcomes (JSONL).")
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True))
@click.option("--tier", type=click.Choice(["low", "high"]), default="high", show_default=True)
@click.option("--model", "model_name", help="Override the model name in the report.")
@click.option("--failure-threshold", default=0.5, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["markdown", "machine"]),
              default="markdown", show_default=True)
@click.option("--out", "out_path", type=click.Path())
@click.option("--stdout", "to_stdout", is_flag=True)
@_wrap_errors
def eval_ocr(hyp_path: str, ref_path: str, tier: str, model_name: Optional[str],
             failure_threshold: float, fmt: str, out_path: Optional[str],
             to_stdout: bool) -> None:
    """Score recognition outcomes against reference transcriptions."""
    _echo_config("eval-ocr", {"hyp": hyp_path, "ref": ref_path, "tier": tier,
                              "failure_threshold": failure_threshold})
    manifest = load_manifest(ref_path)
    outcomes = load_outcomes(hyp_path)
    result = bench.eval_ocr(manifest, outcomes, failure_threshold=failure_threshold,
                            tier=Tier(tier), model_name=model_name)
    rendered = bench.render_ocr_report([result], ReportFormat(fmt))
    _report_out(rendered, out_path, to_stdout)


@main.command(name="eval-psnr")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True),
              help="Manifest whose samples carry 'pair' reference images.")
@click.option("--mode", type=click.Choice(["rgb", "luma"]), default="rgb", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["markdown", "machine"]),
              default="markdown", show_default=True)
@click.option("--out", "out_path", type=click.Path())
@click.option("--stdout", "to_stdout", is_flag=True)
@_wrap_errors
def eval_psnr(manifest_path: str, mode: str, fmt: str, out_path: Optional[str],
              to_stdout: bool) -> None:
    """Aggregate PSNR over (image, pair) manifest entries."""
    _echo_config("eval-psnr", {"manifest": manifest_path, "mode": mode})
    manifest = load_manifest(manifest_path)
    result = score_sr_pairs(manifest, PsnrMode(mode))
    rendered = bench.render_psnr_report(result, ReportFormat(fmt))
    _report_out(rendered, out_path, to_stdout)
    _finish(len(result.failures))


@main.command(name="report")
@click.option("--results", "results_path", required=True, type=click.Path(exists=True),
              help="MACHINE-format report stream to re-render.")
@click.option("--out", "out_path", type=click.Path())
@click.option("--stdout", "to_stdout", is_flag=True)
@_wrap_errors
def report_cmd(results_path: str, out_path: Optional[str], to_stdout: bool) -> None:
    """Re-render a MACHINE report stream as markdown."""
    detection_rows: dict[str, object] = {}
    ocr_rows = []
    sections = []
    with open(results_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            kind = record.get("kind")
            if kind == "detection":
                from .metrics.detection import DetectionScore

                detection_rows[record["task"]] = DetectionScore(
                    precision=record["precision"], recall=record["recall"],
                    map50=record["map50"], map50_95=record["map50_95"],
                    per_threshold_ap={float(k): v for k, v in record["per_threshold_ap"].items()},
                )
            elif kind == "ocr":
                ocr_rows.append(_ocr_result_from_machine(record))
    if detection_rows:
        sections.append(bench.render_detection_report(detection_rows, ReportFormat.MARKDOWN))
    if ocr_rows:
        sections.append(bench.render_ocr_report(ocr_rows, ReportFormat.MARKDOWN))
    rendered = "\n".join(sections)
    _report_out(rendered, out_path, to_stdout)


def _ocr_result_from_machine(record: dict) -> bench.OcrBenchResult:
    return bench.OcrBenchResult(
        model_name=record["model"],
        tier=Tier(record["tier"]),
        mean_wer=record["mean_wer"],
        mean_cer=record["mean_cer"],
        refusal_rate=record["refusal_rate"],
        sample_count=record["sample_count"],
        failed_flag=record["failed"],
        refusal_count=0,
        transport_error_count=0,
        included_count=record.get("included_count", record["sample_count"]),
        per_sample=(),
    )


if __name__ == "__main__":
    main()
