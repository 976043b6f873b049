from collections import Counter

import numpy as np
import pytest
import sacrebleu

import evaluation
from errors import DataError


def split(*sentences):
    return [s.split() for s in sentences]


# ─── BLEU ─────────────────────────────────────────────────────────────────────

@pytest.mark.parametrize("hyp, ref, expected", [
    ("the cat sat on the mat", "the cat sat on a mat", 53.72849659),
    ("a b c d", "a b c d e f", 60.65306597),
    ("the the the cat", "the cat sat down", 0.0),
])
def test_bleu_reference_values(hyp, ref, expected):
    assert evaluation.corpus_bleu(split(hyp), split(ref)) == pytest.approx(expected, abs=1e-6)


def test_identical_corpus_scores_exactly_100():
    corpus = split("a quick test", "of the metric .", "x")
    assert evaluation.corpus_bleu(corpus, corpus) == 100.0


def test_bleu_report_details():
    report = evaluation.bleu(split("a b c d"), split("a b c d e f"))
    assert report.precisions == (1.0, 1.0, 1.0, 1.0)
    assert report.brevity_penalty == pytest.approx(0.6065306597)
    assert (report.hyp_len, report.ref_len) == (4, 6)


def test_bleu_skips_orders_without_hypothesis_ngrams():
    assert evaluation.corpus_bleu(split("a b"), split("a b")) == 100.0


def test_bleu_empty_hypotheses_and_mismatch():
    assert evaluation.corpus_bleu([[]], split("a b")) == 0.0
    with pytest.raises(ValueError):
        evaluation.corpus_bleu(split("a"), split("a", "b"))


def test_bleu_is_case_sensitive():
    assert evaluation.corpus_bleu(split("The cat sat down"), split("the cat sat down")) < 100.0


@pytest.mark.parametrize("seed", range(5))
def test_bleu_agrees_with_sacrebleu(seed):
    rng = np.random.default_rng(seed)
    words = ["a", "b", "c", "d"]

    def sentence():
        return [str(w) for w in rng.choice(words, size=int(rng.integers(6, 13)))]

    hyps = [sentence() for _ in range(20)]
    refs = [sentence() for _ in range(20)]
    ours = evaluation.corpus_bleu(hyps, refs)
    theirs = sacrebleu.corpus_bleu(
        [" ".join(h) for h in hyps], [[" ".join(r) for r in refs]],
        smooth_method="none", tokenize="none", force=True,
    ).score
    assert ours == pytest.approx(theirs, abs=1e-6)


# ─── Paired bootstrap ─────────────────────────────────────────────────────────

REFS = split("the cat sat on the mat", "a dog ran in the park", "it has happened before .",
             "we saw them yesterday", "she reads a long book")
GOOD = [list(r) for r in REFS]
BAD = split("mat the on", "park dog", "before it", "yesterday", "book long a")


@pytest.mark.parametrize("seed", range(10))
def test_bootstrap_identical_systems_tie(seed):
    result = evaluation.paired_bootstrap(GOOD, GOOD, REFS, iters=1000, seed=seed)
    assert result.ties == 1000
    assert result.verdict == "none"
    assert not result.significant
    assert result.p_value_a == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(10))
def test_bootstrap_prefers_clearly_better_system(seed):
    result = evaluation.paired_bootstrap(GOOD, BAD, REFS, iters=1000, alpha=0.05, seed=seed)
    assert result.wins_a == 1000
    assert result.verdict == "A"
    assert result.significant
    assert result.bleu_a == 100.0
    swapped = evaluation.paired_bootstrap(BAD, GOOD, REFS, iters=1000, alpha=0.05, seed=seed)
    assert swapped.verdict == "B"


def test_bootstrap_is_deterministic_per_seed():
    mixed = [GOOD[0], BAD[1], GOOD[2], BAD[3], GOOD[4]]
    first = evaluation.paired_bootstrap(mixed, BAD, REFS, iters=200, seed=7)
    again = evaluation.paired_bootstrap(mixed, BAD, REFS, iters=200, seed=7)
    assert first == again
    assert first.wins_a + first.wins_b + first.ties == 200


@pytest.mark.parametrize("kwargs", [dict(iters=0), dict(alpha=0.0), dict(alpha=1.0)])
def test_bootstrap_rejects_bad_settings(kwargs):
    with pytest.raises(ValueError):
        evaluation.paired_bootstrap(GOOD, BAD, REFS, **kwargs)


def test_bootstrap_rejects_misaligned_input():
    with pytest.raises(ValueError):
        evaluation.paired_bootstrap(GOOD[:2], BAD, REFS)
    with pytest.raises(ValueError):
        evaluation.paired_bootstrap([], [], [])


# ─── Prediction accuracy ──────────────────────────────────────────────────────

REFERENCE = split("NOUN dog VERB ran", "DET the NOUN cat")
DECODED = split("NOUN dog NOUN ran", "DET the NOUN ca@@ p")
FREQUENCIES = Counter({"dog": 10, "ran": 11, "the": 50})


def test_word_frequencies_undo_segmentation():
    freqs = evaluation.word_frequencies(split("NOUN do@@ g VERB ran", "NOUN dog"))
    assert freqs == Counter({"dog": 2, "ran": 1})


def test_tag_accuracy_by_bucket():
    report = evaluation.bucket_accuracy(DECODED, REFERENCE, "tags", FREQUENCIES)
    assert (report.correct, report.total) == (3, 4)
    assert report.infrequent == 1.0
    assert report.oov == 1.0


def test_surface_form_accuracy_by_bucket():
    report = evaluation.bucket_accuracy(DECODED, REFERENCE, "surface_forms", FREQUENCIES)
    assert report.overall == pytest.approx(0.75)
    assert (report.infrequent_correct, report.infrequent_total) == (1, 1)
    assert (report.oov_correct, report.oov_total) == (0, 1)


def test_pos_accuracy_compares_pos_only():
    reference = split("VERB_Tense=Past ran")
    decoded = split("VERB_Tense=Pres ran")
    assert evaluation.prediction_accuracy(decoded, reference, "pos").overall == 1.0
    assert evaluation.prediction_accuracy(decoded, reference, "tags").overall == 0.0


def test_empty_buckets_are_undefined():
    frequent = Counter({"dog": 100, "ran": 100, "the": 100, "cat": 100})
    report = evaluation.bucket_accuracy(DECODED, REFERENCE, "tags", frequent)
    assert report.infrequent is None and report.oov is None
    assert evaluation.AccuracyReport(0, 0).overall is None


def test_accuracy_input_errors():
    with pytest.raises(ValueError):
        evaluation.bucket_accuracy(DECODED, REFERENCE, "lemmas")
    with pytest.raises(DataError, match="sentence 1"):
        evaluation.bucket_accuracy(DECODED, split("NOUN dog VERB ran", "NOUN cat"), "tags")


# ─── Reports ──────────────────────────────────────────────────────────────────

def test_metric_report_is_sorted_and_marks_absent(tmp_path):
    path = tmp_path / "metrics.tsv"
    evaluation.write_metric_report(str(path), {"bleu": 12.5, "accuracy.oov": None, "bp": 1.0})
    assert path.read_text(encoding="utf-8").splitlines() == [
        "metric\tvalue", "accuracy.oov\tabsent", "bleu\t12.500000", "bp\t1.000000",
    ]


def test_bucket_report(tmp_path):
    report = evaluation.bucket_accuracy(DECODED, REFERENCE, "surface_forms", FREQUENCIES)
    path = tmp_path / "buckets.tsv"
    evaluation.write_bucket_report(str(path), evaluation.bucket_rows("MSD", report))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "system\tbucket\taccuracy"
    assert lines[1:] == ["MSD\tall\t0.750000", "MSD\tinfrequent\t1.000000", "MSD\toov\t0.000000"]
