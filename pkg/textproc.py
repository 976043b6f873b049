"""
Deterministic corpus preparation:
  1. Read + repair raw text (ftfy)
  2. Tokenise (whitespace split, punctuation detached from alphanumeric runs)
  3. Truecase sentence-initial tokens
  4. Length-filter parallel pairs
  5. Seeded downsampling
Filtering happens before tags are interleaved, so tags never count toward max_len.
"""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import ftfy
import numpy as np
from loguru import logger

from errors import DataError, ParseError
import utils


@dataclass(frozen=True)
class SentencePair:
    src: Tuple[str, ...]
    tgt: Tuple[str, ...]
    id: int


@dataclass(frozen=True)
class TruecaseModel:
    """lowercased form -> (most frequent casing, count). Immutable once learned."""
    table: Dict[str, Tuple[str, int]]

    def casing(self, token: str):
        entry = self.table.get(token.lower())
        return entry[0] if entry else None


# ─── Reading ──────────────────────────────────────────────────────────────────

def read_corpus(path: str, fix_encoding: bool = True) -> List[str]:
    """Reads a UTF-8 corpus, one sentence per line."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if fix_encoding:
        text = ftfy.fix_text(text)
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def make_pairs(src_lines: Sequence[Sequence[str]], tgt_lines: Sequence[Sequence[str]]) -> List[SentencePair]:
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"parallel corpus is misaligned: {len(src_lines)} source vs {len(tgt_lines)} target lines"
        )
    return [SentencePair(tuple(s), tuple(t), i) for i, (s, t) in enumerate(zip(src_lines, tgt_lines))]


# ─── Tokenisation ─────────────────────────────────────────────────────────────

def _split_chunk(chunk: str) -> List[str]:
    # all-punctuation chunks ("...", "--") stay whole
    if not any(ch.isalnum() for ch in chunk):
        return [chunk]
    start, end = 0, len(chunk)
    leading: List[str] = []
    trailing: List[str] = []
    while not chunk[start].isalnum():
        leading.append(chunk[start])
        start += 1
    while not chunk[end - 1].isalnum():
        trailing.append(chunk[end - 1])
        end -= 1
    return leading + [chunk[start:end]] + trailing[::-1]


def tokenize(line: str) -> List[str]:
    """
    Whitespace split, then leading/trailing punctuation characters become
    separate tokens. Internal punctuation ("don't", "U.S") is kept.
    Idempotent on its own output.
    """
    tokens: List[str] = []
    for chunk in line.split():
        tokens.extend(_split_chunk(chunk))
    return tokens


# ─── Truecasing ───────────────────────────────────────────────────────────────

def learn_truecaser(sentences: Iterable[Sequence[str]]) -> TruecaseModel:
    """
    Learns casings from non-initial positions only (the first token's casing
    is what we are trying to recover). Ties prefer the lowercase form.
    """
    counts: Dict[str, Counter] = defaultdict(Counter)
    for tokens in sentences:
        for tok in tokens[1:]:
            counts[tok.lower()][tok] += 1

    table: Dict[str, Tuple[str, int]] = {}
    for key, casings in counts.items():
        best = min(casings.items(), key=lambda kv: (-kv[1], kv[0] != key, kv[0]))
        table[key] = best
    logger.debug(f"Truecaser learned {len(table)} forms.")
    return TruecaseModel(table)


def truecase(model: TruecaseModel, tokens: Sequence[str]) -> List[str]:
    """Re-cases only the sentence-initial token; unknown tokens are unchanged."""
    out = list(tokens)
    if out:
        casing = model.casing(out[0])
        if casing is not None:
            out[0] = casing
    return out


def save_truecaser(model: TruecaseModel, path: str):
    rows = sorted((key, casing, count) for key, (casing, count) in model.table.items())
    utils.write_tsv(path, rows)


def load_truecaser(path: str) -> TruecaseModel:
    table: Dict[str, Tuple[str, int]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f.read().splitlines(), start=1):
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ParseError(f"expected 3 columns, got {len(cols)}", line_no)
            key, casing, count = cols
            if casing.lower() != key or int(count) < 1:
                raise ParseError(f"inconsistent truecase entry {line!r}", line_no)
            table[key] = (casing, int(count))
    return TruecaseModel(table)


# ─── Filtering + sampling ─────────────────────────────────────────────────────

def filter_pairs(pairs: Iterable[SentencePair], max_len: int = 100) -> List[SentencePair]:
    """Keeps pairs whose both sides have length in [1, max_len]."""
    kept = [p for p in pairs if 1 <= len(p.src) <= max_len and 1 <= len(p.tgt) <= max_len]
    return kept


def downsample(pairs: Sequence[SentencePair], n: int, seed: int) -> List[SentencePair]:
    """n pairs uniformly without replacement; original relative order preserved."""
    if n > len(pairs):
        raise ValueError(f"cannot sample {n} pairs from a corpus of {len(pairs)}")
    if n < 0:
        raise ValueError(f"sample size must be non-negative, got {n}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(pairs), size=n, replace=False))
    return [pairs[i] for i in chosen]
