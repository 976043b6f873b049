import itertools
from collections import Counter

import numpy as np
import pytest

import errcat
from annotate import AnnotatedToken
from errcat import ErrorAnalysis, ErrorCounts
from errors import DataError

# five forms over three lemmas: a/b and c/d are inflections of each other
LEMMAS = {"a": "x", "b": "x", "c": "y", "d": "y", "e": "e"}


def toks(words, lemmas=None):
    lemmas = lemmas or {}
    return [AnnotatedToken(w, lemmas.get(w, LEMMAS.get(w, w)), "X") for w in words]


def test_inflection_errors():
    hyp = toks(["die", "Katze", "schläft"], {"Katze": "katze", "schläft": "schlafen"})
    ref = toks(["die", "Katzen", "schlafen"], {"Katzen": "Katze", "schlafen": "schlafen"})
    assert errcat.classify_errors(hyp, ref) == ErrorCounts(inflection=2)


def test_swapped_words_are_reordering():
    counts = errcat.classify_errors(toks(["A", "B"]), toks(["B", "A"]))
    assert counts == ErrorCounts(reordering=2)


def test_missing_extra_and_lexical_choice():
    assert errcat.classify_errors(toks(["the", "cat"]), toks(["the", "big", "cat"])) == ErrorCounts(missing=1)
    assert errcat.classify_errors(toks(["the", "big", "cat"]), toks(["the", "cat"])) == ErrorCounts(extra=1)
    assert errcat.classify_errors(toks(["the", "dog"]), toks(["the", "cat"])) == ErrorCounts(lexical_choice=1)
    assert errcat.classify_errors([], []) == ErrorCounts()


def test_align_prefers_substitution_then_deletion():
    assert errcat.align(["a"], ["b"]) == [("sub", 0, 0)]
    assert errcat.align(["a", "b"], ["b"]) == [("ins", 0, None), ("match", 1, 0)]
    assert errcat.align([], ["a", "b"]) == [("del", None, 0), ("del", None, 1)]


def test_per_word_labels():
    analysis = errcat.analyse_errors(toks(["the", "dog", "ran"]), toks(["the", "cat", "ran", "off"]))
    assert analysis.hyp_labels == ("ok", "lexical_choice", "ok")
    assert analysis.ref_labels == ("ok", "lexical_choice", "ok", "missing")
    assert analysis.side_counts("ref")["missing"] == 1


def test_counts_properties():
    counts = ErrorCounts(inflection=1, reordering=2, missing=3, extra=4, lexical_choice=5)
    assert counts.grouped_lexical == 12
    assert counts.total == 15
    assert (counts + counts).as_dict()["total"] == 30


def test_missing_lemma_is_a_data_error():
    hyp = [AnnotatedToken("dog", "", "NOUN")]
    with pytest.raises(DataError):
        errcat.classify_errors(hyp, toks(["dog"]))
    with pytest.raises(DataError, match="sentence 1"):
        errcat.corpus_error_totals([toks(["a"]), hyp], [toks(["a"]), toks(["dog"])])


def test_corpus_totals():
    totals = errcat.corpus_error_totals([toks(["A", "B"]), toks(["a"])], [toks(["B", "A"]), toks(["b"])])
    assert totals == ErrorCounts(inflection=1, reordering=2)
    with pytest.raises(ValueError):
        errcat.corpus_error_totals([toks(["a"])], [])


# ─── Exhaustive oracle ────────────────────────────────────────────────────────

RANK = {"match": 0, "sub": 0, "del": 1, "ins": 2}
REST = {"sub": "lexical_choice", "del": "missing", "ins": "extra"}


def all_alignments(hyp, ref, i=0, j=0):
    if i == len(hyp) and j == len(ref):
        yield []
        return
    if i < len(hyp) and j < len(ref):
        op = ("match" if hyp[i] == ref[j] else "sub", i, j)
        for rest in all_alignments(hyp, ref, i + 1, j + 1):
            yield [op] + rest
    if j < len(ref):
        for rest in all_alignments(hyp, ref, i, j + 1):
            yield [("del", None, j)] + rest
    if i < len(hyp):
        for rest in all_alignments(hyp, ref, i + 1, j):
            yield [("ins", i, None)] + rest


def oracle(hyp, ref):
    """Cheapest alignment by enumeration, then the category rules applied from scratch."""
    best = min(all_alignments(hyp, ref),
               key=lambda ops: (sum(op[0] != "match" for op in ops), [RANK[op[0]] for op in ops]))
    errors = [op for op in best if op[0] != "match"]
    inflected = {op for op in errors if op[0] == "sub" and LEMMAS[hyp[op[1]]] == LEMMAS[ref[op[2]]]}
    free_hyp = sorted(op[1] for op in errors if op not in inflected and op[1] is not None)
    free_ref = sorted(op[2] for op in errors if op not in inflected and op[2] is not None)
    moved_hyp, moved_ref = set(), set()
    for i in free_hyp:
        j = next((j for j in free_ref if j not in moved_ref and ref[j] == hyp[i]), None)
        if j is not None:
            moved_hyp.add(i)
            moved_ref.add(j)

    hyp_labels, ref_labels = ["ok"] * len(hyp), ["ok"] * len(ref)
    counts = Counter()
    for op in errors:
        kind, i, j = op
        if op in inflected:
            label = "inflection"
        elif i in moved_hyp or j in moved_ref:
            label = "reordering"
        else:
            label = REST[kind]
        counts[label] += 1
        if i is not None:
            hyp_labels[i] = label
        if j is not None:
            ref_labels[j] = label
    return ErrorAnalysis(tuple(hyp_labels), tuple(ref_labels),
                         ErrorCounts(**{c: counts[c] for c in errcat.CATEGORIES}))


def check_against_oracle(hyp_words, ref_words):
    analysis = errcat.analyse_errors(toks(hyp_words), toks(ref_words))
    assert analysis == oracle(hyp_words, ref_words), (hyp_words, ref_words)
    edits = sum(op[0] != "match" for op in errcat.align(hyp_words, ref_words))
    assert analysis.counts.total == edits


def pairs(vocab, max_total, max_side=None):
    """Every hyp/ref pair with len(hyp) + len(ref) <= max_total."""
    max_side = max_total if max_side is None else max_side
    for n in range(min(max_total, max_side) + 1):
        for m in range(min(max_total - n, max_side) + 1):
            for hyp in itertools.product(vocab, repeat=n):
                for ref in itertools.product(vocab, repeat=m):
                    yield list(hyp), list(ref)


def test_oracle_categories_on_known_cases():
    assert oracle(["a", "c"], ["c", "a"]).counts == ErrorCounts(reordering=2)
    assert oracle(["a"], ["b"]).counts == ErrorCounts(inflection=1)
    assert oracle(["e"], ["c"]).counts == ErrorCounts(lexical_choice=1)


def test_matches_oracle_on_all_pairs_up_to_four_words():
    for hyp, ref in pairs(sorted(LEMMAS), max_total=4):
        check_against_oracle(hyp, ref)


def test_matches_oracle_on_sampled_longer_pairs():
    rng = np.random.default_rng(11)
    vocab = sorted(LEMMAS)
    for _ in range(200):
        hyp = [vocab[k] for k in rng.integers(0, 5, size=int(rng.integers(0, 6)))]
        ref = [vocab[k] for k in rng.integers(0, 5, size=int(rng.integers(0, 6)))]
        check_against_oracle(hyp, ref)


@pytest.mark.slow
def test_matches_oracle_on_all_pairs_up_to_six_words():
    for hyp, ref in pairs(sorted(LEMMAS), max_total=6):
        check_against_oracle(hyp, ref)
    # longer sides over a smaller alphabet: a/b share a lemma, e does not
    for hyp, ref in pairs(["a", "b", "e"], max_total=8, max_side=4):
        check_against_oracle(hyp, ref)


# ─── Reports ──────────────────────────────────────────────────────────────────

def test_relative_change():
    change = errcat.relative_change(ErrorCounts(inflection=120, missing=3), ErrorCounts(inflection=100))
    assert change["inflection"] == pytest.approx(0.20)
    assert change["missing"] is None
    assert change["total"] == pytest.approx(0.23)


def test_error_rates():
    rates = errcat.error_rates(ErrorCounts(extra=2, missing=2), 8)
    assert rates["grouped_lexical"] == 0.5
    assert errcat.error_rates(ErrorCounts(), 0)["total"] is None


def test_write_error_report(tmp_path):
    base = ErrorCounts(inflection=10, reordering=4)
    tl = ErrorCounts(inflection=8, reordering=4)
    path = tmp_path / "errors.tsv"
    errcat.write_error_report(str(path), [("none", base, None), ("TL-MSD", tl, errcat.relative_change(tl, base))])
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "arm\tcategory\tcount\trelative_change"
    assert "none\tinflection\t10\tabsent" in lines
    assert "TL-MSD\tinflection\t8\t-0.200000" in lines
    assert "TL-MSD\tmissing\t0\tabsent" in lines
    assert len(lines) == 1 + 2 * len(errcat.REPORT_CATEGORIES)
