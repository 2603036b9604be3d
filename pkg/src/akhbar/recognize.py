"""Vision-LLM transcription with caching, rate limiting, and replay.

Requests are content-addressed: the digest of (model, prompts, image bytes,
temperature) keys a response cache, so a warm re-run of a benchmark issues
zero network calls and reproduces outcomes byte for byte. Images always go
out as lossless PNG to keep encoder artifacts out of the comparison.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

from .errors import ConfigError, FixtureMissError, ManifestError
from .imageops import encode_png
from .model import PathLike, RasterImage

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PromptProfile:
    name: str
    system_prompt: str
    user_prompt: str


DEFAULT_PROFILE = PromptProfile(
    name="default",
    system_prompt=(
        "You are an OCR system. Your job is to transcribe image text exactly as shown, "
        "without interpretation, paraphrasing, translation, summarization, or hallucination."
    ),
    user_prompt=(
        "Extract the exact text from this image. Preserve sentence structure NOT spacing. "
        "If anything is unreadable, write '[UNREADABLE]'."
    ),
)


class ProviderKind(Enum):
    OPENAI_COMPAT = "openai_compat"
    ANTHROPIC = "anthropic"
    GOOGLE = "google"


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: float = 500.0
    jitter_fraction: float = 0.25

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ConfigError(f"max_attempts must be >= 1, got {self.max_attempts}")

    def backoff_ms(self, attempt: int, rng: random.Random) -> float:
        base = self.base_backoff_ms * (2.0 ** attempt)
        return base * (1.0 + self.jitter_fraction * rng.uniform(-1.0, 1.0))


@dataclass(frozen=True)
class ProviderConfig:
    provider_kind: ProviderKind
    model_name: str
    endpoint: str
    api_key_env: str
    temperature: float = 0.0
    max_output_tokens: int = 4096
    requests_per_minute: int = 60
    max_concurrency: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)


@dataclass(frozen=True)
class RecognitionOutcome:
    """One transcription attempt, cacheable and replayable.

    ``refusal`` preserves the refusal message verbatim in ``text``; a
    transport failure leaves ``text`` empty and ``refusal`` false.
    """

    sample_id: str
    model_name: str
    text: str
    refusal: bool
    raw_digest: str
    latency_ms: float = 0.0
    from_cache: bool = False
    transport_error: Optional[str] = None


def request_digest(provider: ProviderConfig, profile: PromptProfile, image_png: bytes) -> str:
    """Digest of everything that determines a response: model, prompts,
    image bytes, and temperature."""
    h = hashlib.sha256()
    for part in (
        provider.model_name,
        profile.system_prompt,
        profile.user_prompt,
        repr(provider.temperature),
    ):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    h.update(image_png)
    return h.hexdigest()


# --- refusal classification ---------------------------------------------------

DEFAULT_REFUSAL_PATTERNS: tuple[str, ...] = (
    "unfortunately, i am unable to extract text",
    "i can't directly extract text",
    "the image contains text in what appears to be",
)

_INABILITY_PHRASES: tuple[str, ...] = (
    "i am unable",
    "i'm unable",
    "i cannot",
    "i can't",
    "unable to",
    "not able to",
)

_ARABIC_SCRIPT_RANGES = (
    (0x0600, 0x06FF),
    (0x0750, 0x077F),
    (0x08A0, 0x08FF),
    (0xFB50, 0xFDFF),
    (0xFE70, 0xFEFF),
)


def contains_arabic_script(text: str) -> bool:
    for ch in text:
        code = ord(ch)
        for lo, hi in _ARABIC_SCRIPT_RANGES:
            if lo <= code <= hi:
                return True
    return False


def classify_refusal(
    text: str, patterns: Sequence[str] = DEFAULT_REFUSAL_PATTERNS
) -> bool:
    """True when the response declines to transcribe instead of transcribing.

    Matches a configurable, case-insensitive substring list, with a fallback
    heuristic: no Arabic-script codepoints at all plus a first-person
    inability phrase.
    """
    lowered = text.strip().lower().replace("’", "'")
    if any(p in lowered for p in patterns):
        return True
    if contains_arabic_script(text):
        return False
    return any(p in lowered for p in _INABILITY_PHRASES)


def stitch_transcripts(parts: Sequence[RecognitionOutcome]) -> str:
    """Join reading-ordered segment texts with newlines; refusal segments
    contribute the literal token ``[UNREADABLE]``."""
    return "\n".join("[UNREADABLE]" if p.refusal else p.text for p in parts)


# --- response cache -------------------------------------------------------------


class ResponseCache:
    """Content-addressed outcome store: one JSON record per request digest.

    Writes are atomic (temp file + rename); concurrent writers of the same
    digest produce identical payloads, so last-writer-wins is safe.
    """

    def __init__(self, root: PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / f"{digest}.json"

    def get(self, digest: str) -> Optional[dict]:
        path = self._path(digest)
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def put(self, digest: str, record: dict) -> None:
        path = self._path(digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(record, fh, ensure_ascii=False)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


# --- rate limiting ----------------------------------------------------------------


class ProviderLimiter:
    """Sliding-window request cap plus a concurrency semaphore.

    At most ``requests_per_minute`` requests start in any 60-second window,
    and at most ``max_concurrency`` are in flight, across all workers sharing
    the limiter. Clock and sleep are injectable for tests.
    """

    WINDOW_S = 60.0

    def __init__(
        self,
        requests_per_minute: int,
        max_concurrency: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._rpm = requests_per_minute
        self._clock = clock
        self._sleep = sleep
        self._semaphore = threading.BoundedSemaphore(max_concurrency)
        self._lock = threading.Lock()
        self._starts: deque[float] = deque()

    def _await_window(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._starts and self._starts[0] <= now - self.WINDOW_S:
                    self._starts.popleft()
                if len(self._starts) < self._rpm:
                    self._starts.append(now)
                    return
                wait = self._starts[0] + self.WINDOW_S - now
            self._sleep(max(wait, 0.001))

    def __enter__(self) -> "ProviderLimiter":
        self._semaphore.acquire()
        try:
            self._await_window()
        except BaseException:
            self._semaphore.release()
            raise
        return self

    def __exit__(self, *exc_info) -> None:
        self._semaphore.release()


_LIMITERS: dict[tuple, ProviderLimiter] = {}
_LIMITERS_LOCK = threading.Lock()


def limiter_for(provider: ProviderConfig) -> ProviderLimiter:
    """Process-wide limiter shared by every worker using the same provider."""
    key = (
        provider.provider_kind,
        provider.endpoint,
        provider.model_name,
        provider.requests_per_minute,
        provider.max_concurrency,
    )
    with _LIMITERS_LOCK:
        if key not in _LIMITERS:
            _LIMITERS[key] = ProviderLimiter(
                provider.requests_per_minute, provider.max_concurrency
            )
        return _LIMITERS[key]


# --- wire dialects ----------------------------------------------------------------


@dataclass(frozen=True)
class TransportResult:
    status_code: int
    body: Optional[dict]
    text: str = ""


def build_request(
    provider: ProviderConfig, profile: PromptProfile, image_png: bytes, api_key: str
) -> tuple[str, dict, dict]:
    """(url, headers, json payload) for one chat-with-image request."""
    b64 = base64.b64encode(image_png).decode("ascii")
    base = provider.endpoint.rstrip("/")
    if provider.provider_kind is ProviderKind.OPENAI_COMPAT:
        url = f"{base}/chat/completions"
        headers = {"Authorization": f"Bearer {api_key}"}
        payload = {
            "model": provider.model_name,
            "temperature": provider.temperature,
            "max_tokens": provider.max_output_tokens,
            "messages": [
                {"role": "system", "content": profile.system_prompt},
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": profile.user_prompt},
                        {
                            "type": "image_url",
                            "image_url": {"url": f"data:image/png;base64,{b64}"},
                        },
                    ],
                },
            ],
        }
    elif provider.provider_kind is ProviderKind.ANTHROPIC:
        url = f"{base}/v1/messages"
        headers = {"x-api-key": api_key, "anthropic-version": "2023-06-01"}
        payload = {
            "model": provider.model_name,
            "temperature": provider.temperature,
            "max_tokens": provider.max_output_tokens,
            "system": profile.system_prompt,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {
                            "type": "image",
                            "source": {
                                "type": "base64",
                                "media_type": "image/png",
                                "data": b64,
                            },
                        },
                        {"type": "text", "text": profile.user_prompt},
                    ],
                }
            ],
        }
    elif provider.provider_kind is ProviderKind.GOOGLE:
        url = f"{base}/v1beta/models/{provider.model_name}:generateContent"
        headers = {"x-goog-api-key": api_key}
        payload = {
            "systemInstruction": {"parts": [{"text": profile.system_prompt}]},
            "contents": [
                {
                    "parts": [
                        {"inlineData": {"mimeType": "image/png", "data": b64}},
                        {"text": profile.user_prompt},
                    ]
                }
            ],
            "generationConfig": {
                "temperature": provider.temperature,
                "maxOutputTokens": provider.max_output_tokens,
            },
        }
    else:  # pragma: no cover - enum is closed
        raise ConfigError(f"unknown provider kind {provider.provider_kind}")
    return url, headers, payload


def extract_text(kind: ProviderKind, body: dict) -> str:
    try:
        if kind is ProviderKind.OPENAI_COMPAT:
            return body["choices"][0]["message"]["content"] or ""
        if kind is ProviderKind.ANTHROPIC:
            return "".join(
                block.get("text", "") for block in body["content"] if block.get("type") == "text"
            )
        return "".join(
            part.get("text", "")
            for part in body["candidates"][0]["content"]["parts"]
        )
    except (KeyError, IndexError, TypeError) as exc:
        raise ConfigError(f"unexpected {kind.value} response shape: {exc}") from exc


class HttpxTransport:
    """Default transport: one POST per request over a shared client."""

    def __init__(self, timeout_s: float = 120.0):
        import httpx

        self._client = httpx.Client(timeout=timeout_s)
        self._errors = (httpx.HTTPError,)

    def __call__(self, url: str, headers: dict, payload: dict) -> TransportResult:
        try:
            response = self._client.post(url, headers=headers, json=payload)
        except self._errors as exc:
            raise TransportFailure(str(exc)) from exc
        body: Optional[dict]
        try:
            body = response.json()
        except ValueError:
            body = None
        return TransportResult(response.status_code, body, response.text)


class TransportFailure(Exception):
    """Network-level failure (timeouts, connection errors)."""


_RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


def transcribe(
    image: RasterImage,
    provider: ProviderConfig,
    profile: PromptProfile,
    cache: Optional[ResponseCache],
    *,
    sample_id: str = "",
    transport: Optional[Callable[[str, dict, dict], TransportResult]] = None,
    rng: Optional[random.Random] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> RecognitionOutcome:
    """Transcribe one image segment through a provider, cache-first.

    A cache hit returns the stored outcome without touching the network.
    Transport failures and retryable statuses back off exponentially with
    jitter up to ``retry.max_attempts``, then surface in ``transport_error``
    (empty text, refusal false). Refusals are classified, kept verbatim, and
    cached like any other response.
    """
    png = encode_png(image)
    digest = request_digest(provider, profile, png)

    if cache is not None:
        stored = cache.get(digest)
        if stored is not None:
            return RecognitionOutcome(
                sample_id=sample_id,
                model_name=stored["model_name"],
                text=stored["text"],
                refusal=stored["refusal"],
                raw_digest=digest,
                latency_ms=stored.get("latency_ms", 0.0),
                from_cache=True,
                transport_error=None,
            )

    api_key = os.environ.get(provider.api_key_env, "")
    if not api_key:
        raise ConfigError(
            f"API key environment variable {provider.api_key_env!r} is not set"
        )
    if transport is None:
        transport = HttpxTransport()
    rng = rng if rng is not None else random.Random()
    url, headers, payload = build_request(provider, profile, png, api_key)
    limiter = limiter_for(provider)

    last_error = "unknown transport error"
    for attempt in range(provider.retry.max_attempts):
        started = time.monotonic()
        try:
            with limiter:
                result = transport(url, headers, payload)
        except TransportFailure as exc:
            last_error = str(exc)
        else:
            latency_ms = (time.monotonic() - started) * 1000.0
            if result.status_code == 200 and result.body is not None:
                text = extract_text(provider.provider_kind, result.body)
                outcome = RecognitionOutcome(
                    sample_id=sample_id,
                    model_name=provider.model_name,
                    text=text,
                    refusal=classify_refusal(text),
                    raw_digest=digest,
                    latency_ms=latency_ms,
                    from_cache=False,
                    transport_error=None,
                )
                if cache is not None:
                    cache.put(digest, {
                        "model_name": outcome.model_name,
                        "text": outcome.text,
                        "refusal": outcome.refusal,
                        "latency_ms": outcome.latency_ms,
                        "raw_response": result.body,
                    })
                return outcome
            if result.status_code in (401, 403):
                raise ConfigError(
                    f"provider rejected credentials from {provider.api_key_env} "
                    f"(HTTP {result.status_code}): {result.text[:200]}"
                )
            last_error = f"HTTP {result.status_code}: {result.text[:200]}"
            if result.status_code not in _RETRYABLE_STATUS:
                break
        if attempt + 1 < provider.retry.max_attempts:
            sleep(provider.retry.backoff_ms(attempt, rng) / 1000.0)

    logger.warning("transcription failed for %s: %s", sample_id or "<segment>", last_error)
    return RecognitionOutcome(
        sample_id=sample_id,
        model_name=provider.model_name,
        text="",
        refusal=False,
        raw_digest=digest,
        latency_ms=0.0,
        from_cache=False,
        transport_error=last_error,
    )


# --- transcriber front-ends (pipeline stage backends) -------------------------------


class ApiTranscriber:
    """Live-provider stage backend; safe to share across workers."""

    def __init__(
        self,
        provider: ProviderConfig,
        profile: PromptProfile = DEFAULT_PROFILE,
        cache: Optional[ResponseCache] = None,
        transport: Optional[Callable[[str, dict, dict], TransportResult]] = None,
    ):
        self.provider = provider
        self.profile = profile
        self.cache = cache
        self.transport = transport

    def transcribe(self, image: RasterImage, sample_id: str = "") -> RecognitionOutcome:
        return transcribe(
            image,
            self.provider,
            self.profile,
            self.cache,
            sample_id=sample_id,
            transport=self.transport,
        )


class ReplayTranscriber:
    """Replay stage backend serving fixture texts keyed by image digest."""

    def __init__(self, fixture_path: PathLike, model_name: str = "replay"):
        self._path = Path(fixture_path)
        self.model_name = model_name
        self._index: dict[str, str] = {}
        with open(self._path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ManifestError(f"{self._path}:{lineno}: invalid record: {exc}") from exc
                self._index[record["image_digest"]] = record["text"]

    def transcribe(self, image: RasterImage, sample_id: str = "") -> RecognitionOutcome:
        digest = image.digest()
        if digest not in self._index:
            raise FixtureMissError(
                f"no recorded transcription for digest {digest[:16]}... in {self._path}"
            )
        text = self._index[digest]
        return RecognitionOutcome(
            sample_id=sample_id,
            model_name=self.model_name,
            text=text,
            refusal=classify_refusal(text),
            raw_digest=digest,
            latency_ms=0.0,
            from_cache=False,
            transport_error=None,
        )


def write_recognition_fixture(path: PathLike, entries: Sequence[tuple[str, str]]) -> None:
    """Write (image_digest, text) pairs as a replay fixture."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for digest, text in entries:
            fh.write(json.dumps(
                {"image_digest": digest, "text": text},
                ensure_ascii=False, separators=(",", ":"),
            ) + "\n")


# --- outcome persistence -------------------------------------------------------------


def outcome_to_record(outcome: RecognitionOutcome) -> dict:
    return {
        "sample_id": outcome.sample_id,
        "model_name": outcome.model_name,
        "text": outcome.text,
        "refusal": outcome.refusal,
        "raw_digest": outcome.raw_digest,
        "latency_ms": outcome.latency_ms,
        "from_cache": outcome.from_cache,
        "transport_error": outcome.transport_error,
    }


def outcome_from_record(record: dict) -> RecognitionOutcome:
    return RecognitionOutcome(
        sample_id=record["sample_id"],
        model_name=record["model_name"],
        text=record["text"],
        refusal=bool(record["refusal"]),
        raw_digest=record.get("raw_digest", ""),
        latency_ms=float(record.get("latency_ms", 0.0)),
        from_cache=bool(record.get("from_cache", False)),
        transport_error=record.get("transport_error"),
    )


def save_outcomes(outcomes: Sequence[RecognitionOutcome], path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for outcome in outcomes:
            fh.write(json.dumps(
                outcome_to_record(outcome), ensure_ascii=False, separators=(",", ":")
            ) + "\n")


def load_outcomes(path: PathLike) -> list[RecognitionOutcome]:
    outcomes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                outcomes.append(outcome_from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ManifestError(f"{path}:{lineno}: invalid outcome record: {exc}") from exc
    return outcomes
