"""Four-stage batch orchestration over a manifest.

Per sample: detect articles on the page, upscale each article crop, detect
columns on each upscaled article, transcribe every column crop in reading
order, stitch per article. One worker carries a sample through all four
stages; failures are isolated per sample and per article. Every intermediate
is persisted under a per-sample directory.

Run records serialize without wall-clock timings so repeated replay runs are
byte-identical; timings go to a ``timings.jsonl`` sidecar instead. Paths in
records are relative to the output root for the same reason.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__
from .detect import (
    DetectorConfig,
    DetectorTask,
    NeuralDetector,
    ReplayDetector,
    detect_regions,
    reading_order,
)
from .errors import AkhbarError, ConfigError
from .imageops import crop, read_image, write_image
from .model import BoundingBox, Manifest, PathLike, RasterImage, Sample
from .recognize import (
    DEFAULT_PROFILE,
    ApiTranscriber,
    PromptProfile,
    ProviderConfig,
    ProviderKind,
    ReplayTranscriber,
    ResponseCache,
    RetryPolicy,
    stitch_transcripts,
)
from .superres import BicubicUpscaler, NeuralUpscaler, ReplayUpscaler, UpscalerConfig, upscale

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

DEFAULT_CROP_PADDING = 4.0  # detector boxes clip Nastaliq ascenders/descenders


@dataclass(frozen=True)
class DetectorStage:
    config: DetectorConfig
    backend: str = "replay"  # "neural" | "replay"
    fixture_path: Optional[str] = None


@dataclass(frozen=True)
class UpscalerStage:
    config: UpscalerConfig = field(default_factory=UpscalerConfig)
    backend: str = "bicubic"  # "neural" | "replay" | "bicubic"
    fixture_path: Optional[str] = None


@dataclass(frozen=True)
class RecognizerStage:
    backend: str = "replay"  # "api" | "replay"
    profile: PromptProfile = DEFAULT_PROFILE
    provider: Optional[ProviderConfig] = None
    fixture_path: Optional[str] = None
    cache_dir: Optional[str] = None


@dataclass(frozen=True)
class PipelineConfig:
    article_detector: DetectorStage
    upscaler: UpscalerStage
    column_detector: DetectorStage
    recognizer: RecognizerStage
    workers: int = 1
    output_root: str = "runs/out"
    keep_intermediates: bool = True
    crop_padding: float = DEFAULT_CROP_PADDING

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


# --- records -----------------------------------------------------------------------


@dataclass
class ColumnRecord:
    box: BoundingBox
    crop_path: str
    crop_digest: str
    outcome_digest: str
    text: str
    refusal: bool


@dataclass
class ArticleRecord:
    index: int
    box: BoundingBox
    crop_path: str
    crop_digest: str
    upscaled_path: str
    upscaled_digest: str
    columns: list[ColumnRecord] = field(default_factory=list)
    stitched_text: str = ""
    error: Optional[str] = None


@dataclass
class PipelineRecord:
    sample_id: str
    articles: list[ArticleRecord] = field(default_factory=list)
    no_articles: bool = False
    failures: list[str] = field(default_factory=list)
    stage_timings_ms: dict[str, float] = field(default_factory=dict)

    def to_record_dict(self) -> dict:
        """Deterministic serialization; timings are intentionally excluded."""
        return {
            "sample_id": self.sample_id,
            "no_articles": self.no_articles,
            "failures": list(self.failures),
            "articles": [
                {
                    "index": a.index,
                    "box": _box_dict(a.box),
                    "crop_path": a.crop_path,
                    "crop_digest": a.crop_digest,
                    "upscaled_path": a.upscaled_path,
                    "upscaled_digest": a.upscaled_digest,
                    "stitched_text": a.stitched_text,
                    "error": a.error,
                    "columns": [
                        {
                            "box": _box_dict(c.box),
                            "crop_path": c.crop_path,
                            "crop_digest": c.crop_digest,
                            "outcome_digest": c.outcome_digest,
                            "text": c.text,
                            "refusal": c.refusal,
                        }
                        for c in a.columns
                    ],
                }
                for a in self.articles
            ],
        }


def _box_dict(box: BoundingBox) -> dict:
    return {"x_min": box.x_min, "y_min": box.y_min, "x_max": box.x_max, "y_max": box.y_max}


# --- config loading -----------------------------------------------------------------


def _detector_stage(section: dict, task: DetectorTask) -> DetectorStage:
    config = DetectorConfig(
        task=task,
        model_path=section.get("model_path"),
        input_size=int(section.get("input_size", 640)),
        confidence_threshold=float(section.get("confidence_threshold", 0.25)),
        nms_iou_threshold=float(section.get("nms_iou_threshold", 0.45)),
    )
    return DetectorStage(
        config=config,
        backend=section.get("backend", "replay"),
        fixture_path=section.get("fixture"),
    )


def _upscaler_stage(section: dict) -> UpscalerStage:
    config = UpscalerConfig(
        scale=int(section.get("scale", 4)),
        model_path=section.get("model_path"),
        tile_size=int(section.get("tile_size", 256)),
        tile_overlap=int(section.get("tile_overlap", 16)),
    )
    return UpscalerStage(
        config=config,
        backend=section.get("backend", "bicubic"),
        fixture_path=section.get("fixture"),
    )


def _recognizer_stage(section: dict) -> RecognizerStage:
    profile_section = section.get("profile", {})
    profile = PromptProfile(
        name=profile_section.get("name", DEFAULT_PROFILE.name),
        system_prompt=profile_section.get("system_prompt", DEFAULT_PROFILE.system_prompt),
        user_prompt=profile_section.get("user_prompt", DEFAULT_PROFILE.user_prompt),
    )
    provider = None
    if "provider" in section:
        p = section["provider"]
        retry = p.get("retry", {})
        provider = ProviderConfig(
            provider_kind=ProviderKind(p["kind"]),
            model_name=p["model_name"],
            endpoint=p["endpoint"],
            api_key_env=p["api_key_env"],
            temperature=float(p.get("temperature", 0.0)),
            max_output_tokens=int(p.get("max_output_tokens", 4096)),
            requests_per_minute=int(p.get("requests_per_minute", 60)),
            max_concurrency=int(p.get("max_concurrency", 4)),
            retry=RetryPolicy(
                max_attempts=int(retry.get("max_attempts", 3)),
                base_backoff_ms=float(retry.get("base_backoff_ms", 500.0)),
                jitter_fraction=float(retry.get("jitter_fraction", 0.25)),
            ),
        )
    return RecognizerStage(
        backend=section.get("backend", "replay"),
        profile=profile,
        provider=provider,
        fixture_path=section.get("fixture"),
        cache_dir=section.get("cache_dir"),
    )


def load_pipeline_config(path: PathLike, overrides: Optional[dict] = None) -> PipelineConfig:
    """Parse a TOML run configuration, applying dotted-key overrides."""
    with open(path, "rb") as fh:
        tree = tomllib.load(fh)
    for key, value in (overrides or {}).items():
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    try:
        return PipelineConfig(
            article_detector=_detector_stage(tree.get("article_detector", {}), DetectorTask.ARTICLE),
            upscaler=_upscaler_stage(tree.get("upscaler", {})),
            column_detector=_detector_stage(tree.get("column_detector", {}), DetectorTask.COLUMN),
            recognizer=_recognizer_stage(tree.get("recognizer", {})),
            workers=int(tree.get("workers", 1)),
            output_root=str(tree.get("output_root", "runs/out")),
            keep_intermediates=bool(tree.get("keep_intermediates", True)),
            crop_padding=float(tree.get("crop_padding", DEFAULT_CROP_PADDING)),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid pipeline config {path}: {exc}") from exc


def config_digest(config: PipelineConfig) -> str:
    """Stable digest of the effective configuration."""
    return hashlib.sha256(
        json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _jsonable(value):
    if hasattr(value, "__dataclass_fields__"):
        return {name: _jsonable(getattr(value, name)) for name in value.__dataclass_fields__}
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "value") and hasattr(value, "name"):  # Enum
        return value.value
    return value


# --- backend construction --------------------------------------------------------------


def build_detector_backend(stage: DetectorStage):
    if stage.backend == "replay":
        if not stage.fixture_path:
            raise ConfigError(f"{stage.config.task.value} detector: replay backend needs a fixture")
        return ReplayDetector(stage.fixture_path)
    if stage.backend == "neural":
        if not stage.config.model_path:
            raise ConfigError(f"{stage.config.task.value} detector: neural backend needs model_path")
        return NeuralDetector(stage.config.model_path)
    raise ConfigError(f"unknown detector backend {stage.backend!r}")


def build_upscaler_backend(stage: UpscalerStage):
    if stage.backend == "bicubic":
        return BicubicUpscaler()
    if stage.backend == "replay":
        if not stage.fixture_path:
            raise ConfigError("upscaler: replay backend needs a fixture")
        return ReplayUpscaler(stage.fixture_path)
    if stage.backend == "neural":
        if not stage.config.model_path:
            raise ConfigError("upscaler: neural backend needs model_path")
        return NeuralUpscaler(stage.config.model_path)
    raise ConfigError(f"unknown upscaler backend {stage.backend!r}")


def build_transcriber(stage: RecognizerStage, transport=None):
    if stage.backend == "replay":
        if not stage.fixture_path:
            raise ConfigError("recognizer: replay backend needs a fixture")
        return ReplayTranscriber(stage.fixture_path)
    if stage.backend == "api":
        if stage.provider is None:
            raise ConfigError("recognizer: api backend needs a [recognizer.provider] section")
        cache = ResponseCache(stage.cache_dir) if stage.cache_dir else None
        return ApiTranscriber(stage.provider, stage.profile, cache, transport=transport)
    raise ConfigError(f"unknown recognizer backend {stage.backend!r}")


# --- the run ------------------------------------------------------------------------------


class _SampleWorker:
    """Carries one sample through all four stages."""

    def __init__(self, config: PipelineConfig, backends: dict, out_root: Path):
        self.config = config
        self.article_backend = backends["article"]
        self.upscaler_backend = backends["upscaler"]
        self.column_backend = backends["column"]
        self.transcriber = backends["transcriber"]
        self.out_root = out_root

    def _save(self, image: RasterImage, relative: str) -> None:
        if self.config.keep_intermediates:
            write_image(image, self.out_root / relative)

    def run(self, sample: Sample) -> PipelineRecord:
        record = PipelineRecord(sample_id=sample.id)
        timings = record.stage_timings_ms
        try:
            page = read_image(sample.image_path)
        except (OSError, AkhbarError) as exc:
            record.failures.append(f"load: {exc}")
            return record

        started = time.monotonic()
        try:
            articles = reading_order(
                detect_regions(page, self.article_backend, self.config.article_detector.config),
                DetectorTask.ARTICLE,
            )
        except AkhbarError as exc:
            record.failures.append(f"articles: {exc}")
            return record
        timings["articles"] = (time.monotonic() - started) * 1000.0
        if not articles:
            record.no_articles = True
            return record

        for stage in ("upscale", "columns", "recognize"):
            timings.setdefault(stage, 0.0)
        for index, detection in enumerate(articles):
            article = self._run_article(sample, page, index, detection, timings)
            record.articles.append(article)
            if article.error is not None:
                record.failures.append(f"article {index}: {article.error}")
        return record

    def _run_article(
        self, sample: Sample, page: RasterImage, index: int, detection, timings: dict
    ) -> ArticleRecord:
        crop_rel = f"{sample.id}/articles/{index}.png"
        upscaled_rel = f"{sample.id}/upscaled/{index}.png"
        try:
            article_img = crop(page, detection.box, padding=self.config.crop_padding)
            self._save(article_img, crop_rel)

            started = time.monotonic()
            upscaled = upscale(article_img, self.upscaler_backend, self.config.upscaler.config)
            timings["upscale"] += (time.monotonic() - started) * 1000.0
            self._save(upscaled, upscaled_rel)

            started = time.monotonic()
            columns = reading_order(
                detect_regions(upscaled, self.column_backend, self.config.column_detector.config),
                DetectorTask.COLUMN,
            )
            timings["columns"] += (time.monotonic() - started) * 1000.0

            article = ArticleRecord(
                index=index,
                box=detection.box,
                crop_path=crop_rel,
                crop_digest=article_img.digest(),
                upscaled_path=upscaled_rel,
                upscaled_digest=upscaled.digest(),
            )
            outcomes = []
            started = time.monotonic()
            for col_index, col_det in enumerate(columns):
                col_rel = f"{sample.id}/columns/{index}_{col_index}.png"
                col_img = crop(upscaled, col_det.box, padding=0.0)
                self._save(col_img, col_rel)
                outcome = self.transcriber.transcribe(
                    col_img, sample_id=f"{sample.id}:{index}:{col_index}"
                )
                outcomes.append(outcome)
                article.columns.append(ColumnRecord(
                    box=col_det.box,
                    crop_path=col_rel,
                    crop_digest=col_img.digest(),
                    outcome_digest=outcome.raw_digest,
                    text=outcome.text,
                    refusal=outcome.refusal,
                ))
            timings["recognize"] += (time.monotonic() - started) * 1000.0
            article.stitched_text = stitch_transcripts(outcomes)
            if self.config.keep_intermediates:
                text_path = self.out_root / f"{sample.id}/text/{index}.txt"
                text_path.parent.mkdir(parents=True, exist_ok=True)
                text_path.write_text(article.stitched_text, encoding="utf-8")
            return article
        except AkhbarError as exc:
            return ArticleRecord(
                index=index,
                box=detection.box,
                crop_path=crop_rel,
                crop_digest="",
                upscaled_path=upscaled_rel,
                upscaled_digest="",
                stitched_text="",
                error=str(exc),
            )


def run_pipeline(
    manifest: Manifest, config: PipelineConfig, transport=None
) -> list[PipelineRecord]:
    """Process every manifest sample through the four stages.

    Backends are constructed (and validated) before any sample runs; an
    unconstructible backend or unwritable output root aborts up front.
    Per-sample errors are recorded on the sample's PipelineRecord and never
    abort the run. Records are written to ``run.jsonl`` in manifest order.
    """
    out_root = Path(config.output_root)
    out_root.mkdir(parents=True, exist_ok=True)
    backends = {
        "article": build_detector_backend(config.article_detector),
        "upscaler": build_upscaler_backend(config.upscaler),
        "column": build_detector_backend(config.column_detector),
        "transcriber": build_transcriber(config.recognizer, transport=transport),
    }
    worker = _SampleWorker(config, backends, out_root)

    meta = {
        "config_digest": config_digest(config),
        "version": __version__,
        "crop_padding": config.crop_padding,
        "column_order": "right-to-left",
        "article_order": "rows top-to-bottom, right-to-left within a row",
        "prompt_profile": config.recognizer.profile.name,
    }
    (out_root / "run_meta.json").write_text(
        json.dumps(meta, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    samples = list(manifest)
    if config.workers == 1:
        records = [worker.run(sample) for sample in samples]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            records = list(pool.map(worker.run, samples))

    with open(out_root / "run.jsonl", "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(
                record.to_record_dict(), ensure_ascii=False, separators=(",", ":")
            ) + "\n")
    with open(out_root / "timings.jsonl", "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(
                {"sample_id": record.sample_id, "stage_timings_ms": record.stage_timings_ms},
                ensure_ascii=False, separators=(",", ":"),
            ) + "\n")
    failed = sum(1 for r in records if r.failures)
    logger.info("pipeline complete: %d samples, %d with failures", len(records), failed)
    return records
