"""Text normalization and word/character error rates.

WER and CER come from a minimum-cost Levenshtein alignment with unit costs.
The DP fill is vectorized row-by-row with numpy (the in-row insertion chain
becomes a running minimum), so full-paragraph references stay fast; the
backtrace recovers one minimal substitution/insertion/deletion split.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from ..errors import EvalError

# Invisible joiners/spacers that OCR output and hand transcriptions disagree on.
ZERO_WIDTH_CODEPOINTS = frozenset("​‌‍⁠﻿")

# Directional formatting characters, including the Arabic letter mark.
BIDI_CONTROL_CODEPOINTS = frozenset(
    "؜‎‏‪‫‬‭‮⁦⁧⁨⁩"
)

_WHITESPACE_RUN = re.compile(r"\s+")


@dataclass(frozen=True)
class NormalizationPolicy:
    """How strings are canonicalized before comparison.

    Normalization is idempotent: applying it twice equals applying it once.
    """

    unicode_form: str = "NFC"
    strip_zero_width: bool = True
    collapse_whitespace: bool = True
    strip_bidi_controls: bool = True

    def __post_init__(self) -> None:
        if self.unicode_form != "NFC":
            raise ValueError(f"unsupported unicode form {self.unicode_form!r}")


DEFAULT_POLICY = NormalizationPolicy()


def normalize_text(s: str, policy: NormalizationPolicy = DEFAULT_POLICY) -> str:
    """Canonicalize a string for comparison. Total function, never raises."""
    drop = set()
    if policy.strip_zero_width:
        drop |= ZERO_WIDTH_CODEPOINTS
    if policy.strip_bidi_controls:
        drop |= BIDI_CONTROL_CODEPOINTS
    if drop:
        s = "".join(ch for ch in s if ch not in drop)
    # Compose after stripping: removing a joiner can expose a composable pair,
    # and composing first would break idempotence.
    s = unicodedata.normalize(policy.unicode_form, s)
    if policy.collapse_whitespace:
        s = _WHITESPACE_RUN.sub(" ", s).strip()
    return s


@dataclass(frozen=True)
class EditCounts:
    """One minimal alignment's operation counts."""

    substitutions: int
    insertions: int
    deletions: int

    @property
    def total(self) -> int:
        return self.substitutions + self.insertions + self.deletions


@dataclass(frozen=True)
class OcrScore:
    """Word- and character-level error rates for one (reference, hypothesis) pair.

    ``substitutions``/``insertions``/``deletions`` are word-granularity counts;
    the ``char_*`` fields are the character-granularity analogues. Rates can
    exceed 1.0 when the hypothesis is much longer than the reference.
    """

    wer: float
    cer: float
    substitutions: int
    insertions: int
    deletions: int
    reference_token_count: int
    reference_char_count: int
    char_substitutions: int
    char_insertions: int
    char_deletions: int


def _encode(seq: Sequence[Hashable], vocab: dict) -> np.ndarray:
    out = np.empty(len(seq), dtype=np.int64)
    for i, item in enumerate(seq):
        out[i] = vocab.setdefault(item, len(vocab))
    return out


def edit_counts(reference: Sequence[Hashable], hypothesis: Sequence[Hashable]) -> EditCounts:
    """Minimal substitution/insertion/deletion counts aligning the sequences.

    Insertions are hypothesis items with no reference counterpart; deletions
    are reference items with no hypothesis counterpart. The total equals the
    Levenshtein distance under unit costs.
    """
    n, m = len(reference), len(hypothesis)
    if n == 0:
        return EditCounts(0, m, 0)
    if m == 0:
        return EditCounts(0, 0, n)

    vocab: dict = {}
    ref_ids = _encode(reference, vocab)
    hyp_ids = _encode(hypothesis, vocab)

    dist = np.empty((n + 1, m + 1), dtype=np.int32)
    dist[0] = np.arange(m + 1)
    col = np.arange(m + 1)
    for i in range(1, n + 1):
        prev = dist[i - 1]
        sub = prev[:-1] + (hyp_ids != ref_ids[i - 1])
        delete = prev[1:] + 1
        base = np.empty(m + 1, dtype=np.int32)
        base[0] = i
        base[1:] = np.minimum(sub, delete)
        # cur[j] = min over k <= j of base[k] + (j - k): the insertion chain.
        dist[i] = np.minimum.accumulate(base - col) + col

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        here = dist[i, j]
        if i > 0 and j > 0 and ref_ids[i - 1] == hyp_ids[j - 1] and here == dist[i - 1, j - 1]:
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and here == dist[i - 1, j - 1] + 1:
            subs += 1
            i -= 1
            j -= 1
        elif i > 0 and here == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(subs, ins, dels)


def _tokens(normalized: str) -> list[str]:
    return normalized.split(" ") if normalized else []


def word_error_rate(
    reference: str,
    hypothesis: str,
    policy: NormalizationPolicy = DEFAULT_POLICY,
) -> OcrScore:
    """Score a hypothesis against its reference at word and character level.

    Both strings are normalized with ``policy``, tokenized on single spaces
    (punctuation stays attached to tokens), and aligned with unit costs.
    CER runs over the normalized codepoint sequences, spaces included.

    Raises EvalError when the reference is empty after normalization: the
    denominator is undefined.
    """
    ref_norm = normalize_text(reference, policy)
    hyp_norm = normalize_text(hypothesis, policy)
    if not ref_norm:
        raise EvalError("reference is empty after normalization; WER is undefined")

    ref_tokens = _tokens(ref_norm)
    hyp_tokens = _tokens(hyp_norm)
    words = edit_counts(ref_tokens, hyp_tokens)
    chars = edit_counts(ref_norm, hyp_norm)

    return OcrScore(
        wer=words.total / len(ref_tokens),
        cer=chars.total / len(ref_norm),
        substitutions=words.substitutions,
        insertions=words.insertions,
        deletions=words.deletions,
        reference_token_count=len(ref_tokens),
        reference_char_count=len(ref_norm),
        char_substitutions=chars.substitutions,
        char_insertions=chars.insertions,
        char_deletions=chars.deletions,
    )
