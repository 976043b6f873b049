"""
Tag-aware byte-pair encoding.

Learning runs on surface words only: tags never enter the pair statistics.
Applying segments each surface word with the merge table and marks every
non-final unit with "@@"; tags pass through atomically, so a word's tag stays
immediately before its first unit:

    VERB_Tense=Past|VerbForm=Part happened → VERB_Tense=Past|VerbForm=Part happen@@ ed
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from loguru import logger

from annotate import is_tag
from errors import ParseError
import utils

MARKER = "@@"
END_OF_WORD = "</w>"
MERGE_FILE_HEADER = "#version: interleave-mt 1"

Pair = Tuple[str, str]


@dataclass(frozen=True)
class BpeModel:
    merges: Tuple[Pair, ...] = ()
    marker: str = MARKER
    _cache: Dict[str, Tuple[str, ...]] = field(default_factory=dict, compare=False, repr=False)

    @cached_property
    def ranks(self) -> Dict[Pair, int]:
        return {pair: i for i, pair in enumerate(self.merges)}

    def segment(self, word: str) -> Tuple[str, ...]:
        """Units of one surface word, markers included."""
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = _initial_symbols(word)
        ranks = self.ranks
        while len(symbols) > 1:
            candidates = [(ranks[p], p) for p in zip(symbols, symbols[1:]) if p in ranks]
            if not candidates:
                break
            _, best = min(candidates)
            symbols = _merge_word(symbols, best)
        units = [s[: -len(END_OF_WORD)] if s.endswith(END_OF_WORD) else s for s in symbols]
        result = tuple(u + self.marker for u in units[:-1]) + (units[-1],)
        self._cache[word] = result
        return result


def _initial_symbols(word: str) -> Tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + END_OF_WORD,)


def _merge_word(symbols: Tuple[str, ...], pair: Pair) -> Tuple[str, ...]:
    merged: List[str] = []
    i = 0
    while i < len(symbols):
        if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == pair:
            merged.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return tuple(merged)


# ─── Learning ─────────────────────────────────────────────────────────────────

def bpe_learn(corpus: Iterable[Sequence[str]], num_merges: int) -> BpeModel:
    """
    Standard BPE over word frequencies. Each round merges the most frequent
    adjacent pair (ties: lexicographically smallest pair). Stops after
    num_merges rounds or when no pair occurs at least twice.
    """
    if num_merges < 0:
        raise ValueError(f"num_merges must be >= 0, got {num_merges}")

    word_freq: Counter = Counter(
        tok for tokens in corpus for tok in tokens if not is_tag(tok)
    )
    vocab: Dict[Tuple[str, ...], int] = {}
    for word, freq in word_freq.items():
        symbols = _initial_symbols(word)
        vocab[symbols] = vocab.get(symbols, 0) + freq

    merges: List[Pair] = []
    while len(merges) < num_merges:
        stats: Counter = Counter()
        for symbols, freq in vocab.items():
            for pair in zip(symbols, symbols[1:]):
                stats[pair] += freq
        if not stats:
            break
        top = max(stats.values())
        if top < 2:
            break
        best = min(p for p, f in stats.items() if f == top)
        merges.append(best)
        vocab = {_merge_word(symbols, best): freq for symbols, freq in vocab.items()}

    if len(merges) < num_merges:
        logger.info(f"BPE stopped early: {len(merges)}/{num_merges} merges (no repeated pair left).")
    logger.debug(f"BPE learned {len(merges)} merges from {len(word_freq)} word types.")
    return BpeModel(tuple(merges))


# ─── Applying / undoing ───────────────────────────────────────────────────────

def bpe_apply(stream: Sequence[str], model: BpeModel) -> List[str]:
    out: List[str] = []
    for tok in stream:
        if is_tag(tok):
            out.append(tok)
        else:
            out.extend(model.segment(tok))
    return out


def bpe_undo(stream: Sequence[str], marker: str = MARKER, stats: Optional[Counter] = None) -> List[str]:
    """
    Joins every run "u1@@ … uk@@ uk+1" into one token. A run left open by a
    tag or by the end of the stream is closed as-is and counted as dangling.
    """
    out: List[str] = []
    pending: Optional[str] = None
    dangling = 0

    for tok in stream:
        if is_tag(tok):
            if pending is not None:
                out.append(pending)
                pending = None
                dangling += 1
            out.append(tok)
        elif tok.endswith(marker):
            pending = (pending or "") + tok[: -len(marker)]
        else:
            out.append((pending or "") + tok)
            pending = None
    if pending is not None:
        out.append(pending)
        dangling += 1

    if dangling:
        if stats is not None:
            stats["dangling"] += dangling
        logger.warning(f"bpe_undo closed {dangling} dangling continuation(s).")
    return out


def count_segments(corpus: Iterable[Sequence[str]], model: BpeModel) -> int:
    return sum(len(bpe_apply(tokens, model)) for tokens in corpus)


# ─── Merge file ───────────────────────────────────────────────────────────────

def save_bpe(model: BpeModel, path: str):
    utils.ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(MERGE_FILE_HEADER + "\n")
        for left, right in model.merges:
            f.write(f"{left} {right}\n")


def load_bpe(path: str) -> BpeModel:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != MERGE_FILE_HEADER:
        raise ParseError(f"missing merge file header {MERGE_FILE_HEADER!r}", 1)
    merges: List[Pair] = []
    for line_no, line in enumerate(lines[1:], start=2):
        parts = line.split(" ")
        if len(parts) != 2 or not all(parts):
            raise ParseError(f"expected 'left right', got {line!r}", line_no)
        merges.append((parts[0], parts[1]))
    return BpeModel(tuple(merges))
