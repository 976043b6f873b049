"""
Word-level error classification over surface forms and lemmas.

Steps per sentence pair:
  1. Minimal word edit alignment (unit costs). Among minimal alignments the
     lexicographically smallest op sequence wins, with op order
     substitution/match < deletion < insertion, read left to right.
  2. Substitution with equal lemmas (case-insensitive) → inflection.
  3. Erroneous words whose surface form also appears among the other side's
     erroneous words are paired greedily left to right; each edit op that
     involves a paired word → reordering.
  4. What is left: substitution → lexical_choice, deletion (reference word
     unmatched) → missing, insertion (hypothesis word unmatched) → extra.
Every edit op receives exactly one category.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from loguru import logger

from annotate import AnnotatedToken
from errors import DataError
import utils

CATEGORIES = ("inflection", "reordering", "missing", "extra", "lexical_choice")

# (kind, hyp index or None, ref index or None); kind ∈ match, sub, del, ins
EditOp = Tuple[str, Optional[int], Optional[int]]


@dataclass(frozen=True)
class ErrorCounts:
    inflection: int = 0
    reordering: int = 0
    missing: int = 0
    extra: int = 0
    lexical_choice: int = 0

    @property
    def grouped_lexical(self) -> int:
        return self.missing + self.extra + self.lexical_choice

    @property
    def total(self) -> int:
        return self.inflection + self.reordering + self.grouped_lexical

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def as_dict(self) -> Dict[str, int]:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values["grouped_lexical"] = self.grouped_lexical
        values["total"] = self.total
        return values


@dataclass(frozen=True)
class ErrorAnalysis:
    """Per-word labels ('ok' or a category) for both sides, plus the counts."""
    hyp_labels: Tuple[str, ...]
    ref_labels: Tuple[str, ...]
    counts: ErrorCounts

    def side_counts(self, side: str) -> Dict[str, int]:
        labels = self.hyp_labels if side == "hyp" else self.ref_labels
        return {c: labels.count(c) for c in CATEGORIES}


# ─── Alignment ────────────────────────────────────────────────────────────────

def align(hyp: Sequence[str], ref: Sequence[str]) -> List[EditOp]:
    """Lexicographically smallest minimal edit alignment between two word lists."""
    n, m = len(hyp), len(ref)
    # dist[i][j]: edit distance between hyp[i:] and ref[j:]
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n, -1, -1):
        for j in range(m, -1, -1):
            if i == n:
                dist[i][j] = m - j
            elif j == m:
                dist[i][j] = n - i
            else:
                dist[i][j] = min(
                    dist[i + 1][j + 1] + (hyp[i] != ref[j]),
                    dist[i][j + 1] + 1,
                    dist[i + 1][j] + 1,
                )

    ops: List[EditOp] = []
    i = j = 0
    while i < n or j < m:
        if i < n and j < m and dist[i][j] == dist[i + 1][j + 1] + (hyp[i] != ref[j]):
            ops.append(("match" if hyp[i] == ref[j] else "sub", i, j))
            i, j = i + 1, j + 1
        elif j < m and dist[i][j] == dist[i][j + 1] + 1:
            ops.append(("del", None, j))
            j += 1
        else:
            ops.append(("ins", i, None))
            i += 1
    return ops


# ─── Categorisation ───────────────────────────────────────────────────────────

def _same_lemma(a: AnnotatedToken, b: AnnotatedToken) -> bool:
    return a.lemma.lower() == b.lemma.lower()


def categorize(ops: Sequence[EditOp], hyp: Sequence[AnnotatedToken],
               ref: Sequence[AnnotatedToken]) -> ErrorAnalysis:
    """Applies the category rules to a given alignment."""
    hyp_labels = ["ok"] * len(hyp)
    ref_labels = ["ok"] * len(ref)
    counts = dict.fromkeys(CATEGORIES, 0)

    pending: List[EditOp] = []
    for op in ops:
        kind, i, j = op
        if kind == "match":
            continue
        if kind == "sub" and _same_lemma(hyp[i], ref[j]):
            counts["inflection"] += 1
            hyp_labels[i] = ref_labels[j] = "inflection"
        else:
            pending.append(op)

    hyp_err = sorted(i for _, i, _ in pending if i is not None)
    ref_err = sorted(j for _, _, j in pending if j is not None)
    paired_hyp, paired_ref = set(), set()
    for i in hyp_err:
        for j in ref_err:
            if j not in paired_ref and hyp[i].form == ref[j].form:
                paired_hyp.add(i)
                paired_ref.add(j)
                break

    for kind, i, j in pending:
        if i in paired_hyp or j in paired_ref:
            category = "reordering"
        else:
            category = {"sub": "lexical_choice", "del": "missing", "ins": "extra"}[kind]
        counts[category] += 1
        if i is not None:
            hyp_labels[i] = category
        if j is not None:
            ref_labels[j] = category

    return ErrorAnalysis(tuple(hyp_labels), tuple(ref_labels), ErrorCounts(**counts))


def _check_lemmas(tokens: Sequence[AnnotatedToken], side: str):
    for k, tok in enumerate(tokens):
        if not tok.lemma:
            raise DataError(f"{side} word {k} ({tok.form!r}) has no lemma")


def analyse_errors(hyp: Sequence[AnnotatedToken], ref: Sequence[AnnotatedToken]) -> ErrorAnalysis:
    _check_lemmas(hyp, "hypothesis")
    _check_lemmas(ref, "reference")
    ops = align([t.form for t in hyp], [t.form for t in ref])
    return categorize(ops, hyp, ref)


def classify_errors(hyp: Sequence[AnnotatedToken], ref: Sequence[AnnotatedToken]) -> ErrorCounts:
    return analyse_errors(hyp, ref).counts


def corpus_error_totals(hyp_corpus: Sequence[Sequence[AnnotatedToken]],
                        ref_corpus: Sequence[Sequence[AnnotatedToken]]) -> ErrorCounts:
    if len(hyp_corpus) != len(ref_corpus):
        raise ValueError(f"{len(hyp_corpus)} hypotheses for {len(ref_corpus)} references")
    totals = ErrorCounts()
    for k, (hyp, ref) in enumerate(zip(hyp_corpus, ref_corpus)):
        try:
            totals = totals + classify_errors(hyp, ref)
        except DataError as exc:
            raise DataError(f"sentence {k}: {exc}") from exc
    logger.debug(f"Error totals over {len(ref_corpus)} sentences: {totals.as_dict()}")
    return totals


# ─── Reports ──────────────────────────────────────────────────────────────────

REPORT_CATEGORIES = CATEGORIES + ("grouped_lexical", "total")


def relative_change(sys: ErrorCounts, base: ErrorCounts) -> Dict[str, Optional[float]]:
    """(sys - base) / base per category; None where the baseline count is 0."""
    s, b = sys.as_dict(), base.as_dict()
    return {c: ((s[c] - b[c]) / b[c] if b[c] else None) for c in REPORT_CATEGORIES}


def error_rates(counts: ErrorCounts, ref_word_count: int) -> Dict[str, Optional[float]]:
    """Counts normalised by the number of reference words."""
    values = counts.as_dict()
    return {c: (values[c] / ref_word_count if ref_word_count else None) for c in REPORT_CATEGORIES}


def write_error_report(path: str,
                       rows: Iterable[Tuple[str, ErrorCounts, Optional[Dict[str, Optional[float]]]]]):
    """arm<TAB>category<TAB>count<TAB>relative_change (absent without a baseline)."""
    out = []
    for arm, counts, change in rows:
        values = counts.as_dict()
        for c in REPORT_CATEGORIES:
            out.append((arm, c, values[c], change.get(c) if change is not None else None))
    utils.write_tsv(path, out, header=("arm", "category", "count", "relative_change"))
