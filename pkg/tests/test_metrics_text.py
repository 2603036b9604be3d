import unicodedata

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from akhbar.errors import EvalError
from akhbar.metrics.text import (
    NormalizationPolicy,
    edit_counts,
    normalize_text,
    word_error_rate,
)

from oracles import dp_edit_distance

URDU_SAMPLE = "پاکستان"  # پاکستان

# Mixed alphabet with Arabic-script codepoints, used by the random-pair suites.
TOKEN_ALPHABET = ["ا", "ب", "پ", "خبر", "اخبار", "the", "a1", "۔", "x", "قلم"]


class TestNormalize:
    def test_whitespace_collapse(self):
        assert normalize_text("a  b\n c") == "a b c"

    def test_already_normalized_is_identity(self):
        assert normalize_text("a b c") == "a b c"

    def test_strips_zero_width_non_joiner(self):
        with_zwnj = "می‌خواہم"
        out = normalize_text(with_zwnj)
        assert "‌" not in out
        assert [c for c in out] == [c for c in with_zwnj if c != "‌"]

    def test_strips_bidi_controls(self):
        assert normalize_text("‏سلام‎") == "سلام"

    def test_nfc_composition(self):
        decomposed = "é"  # e + combining acute
        assert normalize_text(decomposed) == unicodedata.normalize("NFC", decomposed)

    def test_policy_toggles(self):
        keep = NormalizationPolicy(strip_zero_width=False, collapse_whitespace=False,
                                   strip_bidi_controls=False)
        assert normalize_text("a‌  b ", keep) == "a‌  b "

    def test_only_nfc_supported(self):
        with pytest.raises(ValueError):
            NormalizationPolicy(unicode_form="NFKC")

    @settings(max_examples=1000, deadline=None)
    @given(st.text(max_size=60))
    def test_idempotent(self, s):
        once = normalize_text(s)
        assert normalize_text(once) == once


class TestEditCounts:
    def test_identical(self):
        counts = edit_counts(list("abc"), list("abc"))
        assert counts.total == 0

    def test_empty_reference(self):
        counts = edit_counts([], ["a", "b"])
        assert (counts.substitutions, counts.insertions, counts.deletions) == (0, 2, 0)

    def test_empty_hypothesis(self):
        counts = edit_counts(["a", "b"], [])
        assert (counts.substitutions, counts.insertions, counts.deletions) == (0, 0, 2)

    def test_matches_dp_oracle_on_random_pairs(self, rng):
        for _ in range(200):
            ref = [TOKEN_ALPHABET[i] for i in rng.integers(0, len(TOKEN_ALPHABET), rng.integers(0, 15))]
            hyp = [TOKEN_ALPHABET[i] for i in rng.integers(0, len(TOKEN_ALPHABET), rng.integers(0, 15))]
            assert edit_counts(ref, hyp).total == dp_edit_distance(ref, hyp)

    @settings(max_examples=200, deadline=None)
    @given(st.text(alphabet="ابپt ", max_size=20), st.text(alphabet="ابپt ", max_size=20))
    def test_symmetric_distance(self, a, b):
        assert edit_counts(list(a), list(b)).total == edit_counts(list(b), list(a)).total

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.sampled_from(TOKEN_ALPHABET), max_size=10),
        st.lists(st.sampled_from(TOKEN_ALPHABET), max_size=10),
        st.lists(st.sampled_from(TOKEN_ALPHABET), max_size=10),
    )
    def test_triangle_inequality(self, a, b, c):
        d_ac = edit_counts(a, c).total
        d_ab = edit_counts(a, b).total
        d_bc = edit_counts(b, c).total
        assert d_ac <= d_ab + d_bc


class TestWordErrorRate:
    def test_identical_strings(self):
        score = word_error_rate(URDU_SAMPLE + " زندہ باد", URDU_SAMPLE + " زندہ باد")
        assert score.wer == 0.0 and score.cer == 0.0

    def test_one_substitution_in_four(self):
        score = word_error_rate("w1 w2 w3 w4", "w1 xx w3 w4")
        assert score.wer == 0.25
        assert score.substitutions == 1
        assert score.insertions == 0 and score.deletions == 0

    def test_wer_can_exceed_one(self):
        score = word_error_rate("x", "a b c")
        assert score.wer == 3.0
        assert score.substitutions == 1 and score.insertions == 2

    def test_empty_reference_raises(self):
        with pytest.raises(EvalError):
            word_error_rate("  ‌ ", "anything")

    def test_wer_invariant_holds(self):
        score = word_error_rate("سلام دنیا کیسی ہے", "سلام سب کیسی")
        total = score.substitutions + score.insertions + score.deletions
        assert score.wer == total / score.reference_token_count
        char_total = score.char_substitutions + score.char_insertions + score.char_deletions
        assert score.cer == char_total / score.reference_char_count

    def test_whitespace_insensitive(self):
        assert word_error_rate("a b", "a\n   b").wer == 0.0

    def test_cer_counts_spaces(self):
        # "ab" vs "a b": one space insertion at character level
        score = word_error_rate("ab", "a b")
        assert score.char_insertions == 1
        assert score.cer == 0.5
