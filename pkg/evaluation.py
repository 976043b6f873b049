"""
Evaluation metrics.

  1. Corpus BLEU (4-gram, clipped precisions, brevity penalty, no smoothing)
  2. Paired bootstrap resampling between two systems
  3. Tag / surface-form / POS prediction accuracy on forced-decoding output,
     overall and for infrequent (training frequency 1-10) and OOV reference words
All inputs are token sequences; hypotheses are expected tag-free for BLEU.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from annotate import split_interleaved, strip_tags, tag_pos
from bpe import bpe_undo
from errors import DataError
import utils

MAX_ORDER = 4
INFREQUENT_MAX = 10
ACCURACY_TARGETS = ("tags", "surface_forms", "pos")


# ─── BLEU ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class BleuReport:
    score: float
    precisions: Tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp: Sequence[str], ref: Sequence[str]) -> np.ndarray:
    """[matches_1..4, totals_1..4, hyp_len, ref_len] for one sentence pair."""
    stats = np.zeros(2 * MAX_ORDER + 2, dtype=np.int64)
    for n in range(1, MAX_ORDER + 1):
        hyp_counts = _ngrams(hyp, n)
        ref_counts = _ngrams(ref, n)
        stats[n - 1] = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        stats[MAX_ORDER + n - 1] = max(len(hyp) - n + 1, 0)
    stats[-2] = len(hyp)
    stats[-1] = len(ref)
    return stats


def corpus_stats(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> np.ndarray:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    if not hyps:
        return np.zeros((0, 2 * MAX_ORDER + 2), dtype=np.int64)
    return np.stack([sentence_stats(h, r) for h, r in zip(hyps, refs)])


def bleu_from_stats(totals: np.ndarray) -> BleuReport:
    """
    BLEU from summed statistics. Orders without any hypothesis n-gram are
    left out of the geometric mean; a zero precision on any other order
    gives 0.
    """
    matches = [int(m) for m in totals[:MAX_ORDER]]
    counts = [int(t) for t in totals[MAX_ORDER:2 * MAX_ORDER]]
    hyp_len, ref_len = int(totals[-2]), int(totals[-1])
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, counts))

    if hyp_len == 0:
        return BleuReport(0.0, precisions, 0.0, hyp_len, ref_len)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)

    used = [(m, t) for m, t in zip(matches, counts) if t]
    if any(m == 0 for m, _ in used):
        return BleuReport(0.0, precisions, bp, hyp_len, ref_len)
    product = Fraction(1)
    for m, t in used:
        product *= Fraction(m, t)
    geo = 1.0 if product == 1 else math.exp(math.log(product) / len(used))
    return BleuReport(100.0 * bp * geo, precisions, bp, hyp_len, ref_len)


def bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> BleuReport:
    """Corpus-level, case-sensitive BLEU over tokenised text."""
    return bleu_from_stats(corpus_stats(hyps, refs).sum(axis=0))


def corpus_bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    return bleu(hyps, refs).score


# ─── Paired bootstrap ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class BootstrapResult:
    iterations: int
    wins_a: int
    wins_b: int
    ties: int
    bleu_a: float
    bleu_b: float
    alpha: float
    seed: int

    @property
    def effective_wins_a(self) -> float:
        return self.wins_a + self.ties / 2

    @property
    def effective_wins_b(self) -> float:
        return self.wins_b + self.ties / 2

    @property
    def p_value_a(self) -> float:
        """Share of resamples where A is not better (ties split evenly)."""
        return 1.0 - self.effective_wins_a / self.iterations

    @property
    def p_value_b(self) -> float:
        return 1.0 - self.effective_wins_b / self.iterations

    @property
    def verdict(self) -> str:
        needed = (1.0 - self.alpha) * self.iterations
        if self.effective_wins_a >= needed:
            return "A"
        if self.effective_wins_b >= needed:
            return "B"
        return "none"

    @property
    def significant(self) -> bool:
        return self.verdict != "none"


def paired_bootstrap(
    hyps_a: Sequence[Sequence[str]],
    hyps_b: Sequence[Sequence[str]],
    refs: Sequence[Sequence[str]],
    iters: int = 1000,
    alpha: float = 0.05,
    seed: int = 1,
) -> BootstrapResult:
    """
    Resamples sentence indices with replacement `iters` times and compares
    corpus BLEU of A and B on each resample. Each resample draws from its own
    generator spawned from `seed`.
    """
    if len(hyps_a) != len(refs) or len(hyps_b) != len(refs):
        raise ValueError(f"system outputs ({len(hyps_a)}, {len(hyps_b)}) and references ({len(refs)}) differ in length")
    if not refs:
        raise ValueError("cannot bootstrap an empty test set")
    if iters < 1 or not 0.0 < alpha < 1.0:
        raise ValueError(f"invalid bootstrap settings iters={iters}, alpha={alpha}")

    stats_a = corpus_stats(hyps_a, refs)
    stats_b = corpus_stats(hyps_b, refs)
    n = len(refs)
    wins_a = wins_b = ties = 0
    for child in np.random.SeedSequence(seed).spawn(iters):
        idx = np.random.default_rng(child).integers(0, n, size=n)
        score_a = bleu_from_stats(stats_a[idx].sum(axis=0)).score
        score_b = bleu_from_stats(stats_b[idx].sum(axis=0)).score
        if score_a > score_b:
            wins_a += 1
        elif score_b > score_a:
            wins_b += 1
        else:
            ties += 1

    result = BootstrapResult(
        iterations=iters, wins_a=wins_a, wins_b=wins_b, ties=ties,
        bleu_a=bleu_from_stats(stats_a.sum(axis=0)).score,
        bleu_b=bleu_from_stats(stats_b.sum(axis=0)).score,
        alpha=alpha, seed=seed,
    )
    logger.info(
        f"Bootstrap: A {result.bleu_a:.2f} vs B {result.bleu_b:.2f}, wins {wins_a}/{wins_b}/{ties} "
        f"(A/B/tie) → verdict {result.verdict}"
    )
    return result


# ─── Prediction accuracy ──────────────────────────────────────────────────────

@dataclass(frozen=True)
class AccuracyReport:
    correct: int
    total: int
    infrequent_correct: int = 0
    infrequent_total: int = 0
    oov_correct: int = 0
    oov_total: int = 0

    @staticmethod
    def _fraction(correct: int, total: int) -> Optional[float]:
        return correct / total if total else None

    @property
    def overall(self) -> Optional[float]:
        return self._fraction(self.correct, self.total)

    @property
    def infrequent(self) -> Optional[float]:
        return self._fraction(self.infrequent_correct, self.infrequent_total)

    @property
    def oov(self) -> Optional[float]:
        return self._fraction(self.oov_correct, self.oov_total)


def word_frequencies(train_streams: Iterable[Sequence[str]]) -> Counter:
    """Training-side word counts (tags removed, BPE undone)."""
    return Counter(w for stream in train_streams for w in bpe_undo(strip_tags(stream)))


def _aligned_blocks(decoded: Sequence[str], reference: Sequence[str]) -> List[Tuple[Tuple[str, str], Tuple[str, str]]]:
    d = split_interleaved(bpe_undo(decoded))
    r = split_interleaved(bpe_undo(reference))
    if len(d) != len(r):
        raise DataError(f"decoded output has {len(d)} words, reference has {len(r)}")
    return list(zip(d, r))


def _is_correct(d: Tuple[str, str], r: Tuple[str, str], target: str) -> bool:
    if target == "tags":
        return d[0] == r[0]
    if target == "surface_forms":
        return d[1] == r[1]
    return tag_pos(d[0]) == tag_pos(r[0])


def bucket_accuracy(
    decoded: Sequence[Sequence[str]],
    reference: Sequence[Sequence[str]],
    target: str,
    frequencies: Optional[Counter] = None,
) -> AccuracyReport:
    """
    Accuracy of `target` ("tags", "surface_forms" or "pos") per position.
    With a frequency table, positions are also bucketed by the reference
    word's training frequency: 0 → OOV, 1..10 → infrequent.
    """
    if target not in ACCURACY_TARGETS:
        raise ValueError(f"unknown accuracy target {target!r} (expected one of {ACCURACY_TARGETS})")
    if len(decoded) != len(reference):
        raise ValueError(f"{len(decoded)} decoded sentences for {len(reference)} references")

    counts = Counter()
    for i, (dec, ref) in enumerate(zip(decoded, reference)):
        try:
            blocks = _aligned_blocks(dec, ref)
        except DataError as exc:
            raise DataError(f"sentence {i}: {exc}") from exc
        for d, r in blocks:
            ok = _is_correct(d, r, target)
            counts["total"] += 1
            counts["correct"] += ok
            if frequencies is None:
                continue
            freq = frequencies.get(r[1], 0)
            bucket = "oov" if freq == 0 else ("infrequent" if freq <= INFREQUENT_MAX else None)
            if bucket:
                counts[f"{bucket}_total"] += 1
                counts[f"{bucket}_correct"] += ok

    return AccuracyReport(
        correct=counts["correct"], total=counts["total"],
        infrequent_correct=counts["infrequent_correct"], infrequent_total=counts["infrequent_total"],
        oov_correct=counts["oov_correct"], oov_total=counts["oov_total"],
    )


def prediction_accuracy(decoded: Sequence[Sequence[str]], reference: Sequence[Sequence[str]],
                        target: str) -> AccuracyReport:
    return bucket_accuracy(decoded, reference, target)


# ─── Reports ──────────────────────────────────────────────────────────────────

def write_metric_report(path: str, metrics: Dict[str, Optional[float]]):
    """metric<TAB>value; undefined values are written as 'absent'."""
    utils.write_tsv(path, sorted(metrics.items()), header=("metric", "value"))


def bucket_rows(system: str, report: AccuracyReport) -> List[Tuple[str, str, Optional[float]]]:
    return [
        (system, "all", report.overall),
        (system, "infrequent", report.infrequent),
        (system, "oov", report.oov),
    ]


def write_bucket_report(path: str, rows: Iterable[Tuple[str, str, Optional[float]]]):
    """Long format for plotting: system<TAB>bucket<TAB>accuracy."""
    utils.write_tsv(path, rows, header=("system", "bucket", "accuracy"))
