"""
Beam search with constraint modes.

  Free        — plain decoding; for tag-trained models tag/word parity is a hard mask
  ForceTags   — the k-th tag position emits the k-th reference tag
  ForceWords  — word positions emit the reference sub-word units, tag positions are free
  RestrictPOS — the k-th tag position may only emit tags whose POS is the k-th reference POS

A tag position follows the sentence start or a word-final unit (no "@@");
a word position follows a tag or a "@@" unit. Constraints index whole
words/tags, not sub-word steps.

Models are anything with `tgt_vocab`, `tgt_tag_kind`, `encode(src_tokens)` and
`next_log_probs(memory, prefixes) -> (k, V)` (see nmt.Translator).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from loguru import logger

import config
from annotate import is_tag, tag_pos
from bpe import MARKER
from errors import ConfigError, DataError, InterleaveMTError
import utils


class TranslationModel(Protocol):
    tgt_vocab: Any
    tgt_tag_kind: Optional[str]

    def encode(self, src_tokens: Sequence[str]): ...

    def next_log_probs(self, memory, prefixes: Sequence[Sequence[int]]) -> np.ndarray: ...


# ─── Constraints ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Free:
    class_mask: bool = True


@dataclass(frozen=True)
class ForceTags:
    tags: Tuple[str, ...]


@dataclass(frozen=True)
class ForceWords:
    units: Tuple[str, ...]


@dataclass(frozen=True)
class RestrictPOS:
    pos: Tuple[str, ...]


DecodeConstraint = Union[Free, ForceTags, ForceWords, RestrictPOS]


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: Tuple[int, ...]
    score: float
    expect_tag: bool = True
    tags_seen: int = 0
    units_seen: int = 0


@dataclass(frozen=True)
class BeamResult:
    tokens: List[str]  # without </s>
    score: float       # summed log-probability, </s> included
    length: int        # emitted symbols, </s> included
    norm_score: float


# ─── Symbol classes ───────────────────────────────────────────────────────────

class SymbolClasses:
    """Index sets over a target vocabulary used to build the per-step masks."""

    def __init__(self, vocab):
        symbols = vocab.itos
        self.eos_id = vocab.eos_id
        self.unk_id = vocab.unk_id
        self.size = len(symbols)
        self.is_tag = np.array([i > 3 and is_tag(s) for i, s in enumerate(symbols)])
        self.has_marker = np.array([i > 3 and s.endswith(MARKER) for i, s in enumerate(symbols)])
        ids = np.arange(self.size)
        self.any_ids = ids[2:]  # everything but <pad> <s>
        self.tag_ids = ids[self.is_tag]
        word_mask = ~self.is_tag
        word_mask[:4] = False
        word_mask[self.unk_id] = True
        self.word_ids = ids[word_mask]
        self.final_word_ids = ids[word_mask & ~self.has_marker]
        self.tag_or_eos_ids = np.sort(np.append(self.tag_ids, self.eos_id))
        self.by_pos: Dict[str, np.ndarray] = {}
        for i in self.tag_ids:
            pos = tag_pos(symbols[i])
            if pos is not None:
                self.by_pos.setdefault(pos, [])
                self.by_pos[pos].append(i)
        self.by_pos = {k: np.array(v) for k, v in self.by_pos.items()}
        self.index = vocab.index


def _validate(model: TranslationModel, constraint: DecodeConstraint):
    if isinstance(constraint, Free):
        return
    if model.tgt_tag_kind is None:
        raise ConfigError(
            f"{type(constraint).__name__} decoding needs a model trained with target-side tags"
        )
    reference = {ForceTags: "tags", ForceWords: "units", RestrictPOS: "pos"}[type(constraint)]
    if isinstance(constraint, RestrictPOS) and model.tgt_tag_kind != "MSD":
        raise ConfigError(f"RestrictPOS decoding needs an MSD-tagged model, got {model.tgt_tag_kind}")
    if not getattr(constraint, reference):
        raise DataError(f"{type(constraint).__name__} needs a non-empty reference")


def _word_ids(classes: SymbolClasses, steps_left: int, tags_left: int) -> np.ndarray:
    # the current word must end now if a "@@" unit would leave too few steps
    # for the remaining tag/word pairs and </s>
    if steps_left < 2 * tags_left + 3:
        return classes.final_word_ids
    return classes.word_ids


def _allowed(h: BeamHypothesis, constraint: DecodeConstraint, classes: SymbolClasses,
             tagged: bool, steps_left: int) -> np.ndarray:
    if isinstance(constraint, Free):
        if not (tagged and constraint.class_mask):
            return classes.any_ids
        return classes.tag_or_eos_ids if h.expect_tag else classes.word_ids

    if isinstance(constraint, ForceTags):
        if not h.expect_tag:
            return _word_ids(classes, steps_left, len(constraint.tags) - h.tags_seen)
        if h.tags_seen >= len(constraint.tags):
            return np.array([classes.eos_id])
        return np.array([classes.index(constraint.tags[h.tags_seen])])

    if isinstance(constraint, ForceWords):
        if h.units_seen >= len(constraint.units):
            return np.array([classes.eos_id])
        if h.expect_tag:
            return classes.tag_ids
        return np.array([classes.index(constraint.units[h.units_seen])])

    # RestrictPOS
    if not h.expect_tag:
        return _word_ids(classes, steps_left, len(constraint.pos) - h.tags_seen)
    if h.tags_seen >= len(constraint.pos):
        return np.array([classes.eos_id])
    wanted = constraint.pos[h.tags_seen]
    ids = classes.by_pos.get(wanted)
    if ids is None or not len(ids):
        raise DataError(f"no vocabulary tag has POS {wanted!r}")
    return ids


def _advance(h: BeamHypothesis, tok: int, score: float, classes: SymbolClasses,
             by_role: bool, constraint: DecodeConstraint) -> BeamHypothesis:
    tag_step = h.expect_tag if by_role else bool(classes.is_tag[tok])
    if tag_step:
        return BeamHypothesis(h.tokens + (tok,), score, False, h.tags_seen + 1, h.units_seen)
    if isinstance(constraint, ForceWords):
        # word boundaries follow the reference unit; tok may be <unk>
        word_done = not constraint.units[h.units_seen].endswith(MARKER)
    else:
        word_done = not bool(classes.has_marker[tok])
    return BeamHypothesis(h.tokens + (tok,), score, word_done, h.tags_seen, h.units_seen + 1)


def _with_reference_symbols(tokens: List[str], constraint: Union[ForceTags, ForceWords]) -> List[str]:
    """Forced positions show the reference symbol, also where the model only knows it as <unk>."""
    out: List[str] = []
    expect_tag, k = True, 0
    for tok in tokens:
        tag_step = expect_tag
        if tag_step == isinstance(constraint, ForceTags):
            tok = constraint.tags[k] if tag_step else constraint.units[k]
            k += 1
        expect_tag = False if tag_step else not tok.endswith(MARKER)
        out.append(tok)
    return out


def _top(scores: np.ndarray, ids: np.ndarray, k: int) -> List[int]:
    # highest score first; equal scores → lower symbol id first
    order = np.lexsort((ids, -scores))
    return [int(ids[j]) for j in order[:k]]


# ─── Search ───────────────────────────────────────────────────────────────────

def beam_search(
    model: TranslationModel,
    src: Sequence[str],
    beam: int = config.DEFAULT_BEAM,
    constraint: DecodeConstraint = Free(),
    max_len: Optional[int] = None,
    alpha: float = 1.0,
) -> BeamResult:
    """
    Each alive hypothesis proposes its own top-`beam` allowed symbols; </s>
    candidates are finished, the rest compete for the next `beam` slots.
    Hypotheses still alive at max_len are finished as they are (under a
    constraint, only if no hypothesis completed it). The result maximises
    score / length**alpha.
    """
    if beam < 1:
        raise ConfigError(f"beam width must be >= 1, got {beam}")
    _validate(model, constraint)
    classes = SymbolClasses(model.tgt_vocab)
    tagged = model.tgt_tag_kind is not None
    masked = tagged and not (isinstance(constraint, Free) and not constraint.class_mask)
    max_len = max_len if max_len is not None else 2 * len(src) + 10
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")

    memory = model.encode(src)
    alive = [BeamHypothesis((), 0.0)]
    finished: List[BeamHypothesis] = []

    def norm(h: BeamHypothesis) -> float:
        return h.score / (len(h.tokens) ** alpha)

    for step in range(max_len):
        logp = model.next_log_probs(memory, [h.tokens for h in alive])
        pool = []
        for rank, h in enumerate(alive):
            ids = _allowed(h, constraint, classes, tagged, max_len - step)
            for tok in _top(logp[rank, ids], ids, beam):
                score = h.score + float(logp[rank, tok])
                if tok == classes.eos_id:
                    finished.append(BeamHypothesis(h.tokens + (tok,), score))
                else:
                    pool.append((-score, rank, tok, h))
        pool.sort(key=lambda c: c[:3])
        alive = [_advance(h, tok, -neg, classes, masked, constraint) for neg, _, tok, h in pool[:beam]]
        if not alive:
            break
        if finished:
            best_finished = max(norm(f) for f in finished)
            if best_finished >= max(a.score for a in alive) / (max_len ** alpha):
                break
    else:
        # constrained hypotheses cut at max_len only count when none completed
        if isinstance(constraint, Free) or not finished:
            finished.extend(alive)

    if not finished:
        raise DataError("no hypothesis could be completed under the constraint")
    best = max(finished, key=norm)
    tokens = model.tgt_vocab.decode([t for t in best.tokens if t != classes.eos_id])
    if isinstance(constraint, (ForceTags, ForceWords)):
        tokens = _with_reference_symbols(tokens, constraint)
    return BeamResult(
        tokens=tokens,
        score=best.score,
        length=len(best.tokens),
        norm_score=norm(best),
    )


def greedy_decode(model: TranslationModel, src: Sequence[str],
                  constraint: DecodeConstraint = Free(), max_len: Optional[int] = None) -> List[str]:
    """Arg-max over the allowed symbols until </s> or max_len."""
    _validate(model, constraint)
    classes = SymbolClasses(model.tgt_vocab)
    tagged = model.tgt_tag_kind is not None
    masked = tagged and not (isinstance(constraint, Free) and not constraint.class_mask)
    max_len = max_len if max_len is not None else 2 * len(src) + 10
    memory = model.encode(src)
    h = BeamHypothesis((), 0.0)
    for step in range(max_len):
        logp = model.next_log_probs(memory, [h.tokens])[0]
        ids = _allowed(h, constraint, classes, tagged, max_len - step)
        tok = _top(logp[ids], ids, 1)[0]
        if tok == classes.eos_id:
            break
        h = _advance(h, tok, h.score + float(logp[tok]), classes, masked, constraint)
    return model.tgt_vocab.decode(h.tokens)


def translate(model: TranslationModel, src: Sequence[str], beam: int = config.DEFAULT_BEAM,
              constraint: DecodeConstraint = Free(), **kwargs) -> List[str]:
    return beam_search(model, src, beam, constraint, **kwargs).tokens


def reference_max_len(refs: Sequence[Sequence[str]]) -> int:
    """Length budget for constrained decoding: twice the longest reference, plus 10."""
    return max((2 * len(r) for r in refs), default=0) + 10


def batch_decode(
    model: TranslationModel,
    corpus: Sequence[Sequence[str]],
    constraint: Union[DecodeConstraint, Sequence[DecodeConstraint]] = Free(),
    beam: int = config.DEFAULT_BEAM,
    threads: Optional[int] = None,
    **kwargs,
) -> List[BeamResult]:
    """
    Decodes every sentence, in parallel when threads > 1; output order follows
    the input. `constraint` is shared or given per sentence.
    """
    if isinstance(constraint, (Free, ForceTags, ForceWords, RestrictPOS)):
        constraints = [constraint] * len(corpus)
    else:
        constraints = list(constraint)
        if len(constraints) != len(corpus):
            raise DataError(f"{len(constraints)} constraints for {len(corpus)} sentences")
    threads = threads or config.THREADS

    def one(i: int) -> BeamResult:
        try:
            return beam_search(model, corpus[i], beam, constraints[i], **kwargs)
        except InterleaveMTError as exc:
            raise type(exc)(f"sentence {i}: {exc}") from exc

    if threads <= 1 or len(corpus) < 2:
        return [one(i) for i in range(len(corpus))]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(one, range(len(corpus))))


def batch_translate(model, corpus, constraint=Free(), beam: int = config.DEFAULT_BEAM,
                    threads: Optional[int] = None, **kwargs) -> List[List[str]]:
    return [r.tokens for r in batch_decode(model, corpus, constraint, beam, threads, **kwargs)]


def write_scores(path: str, results: Sequence[BeamResult]):
    """Sidecar file: id<TAB>logprob<TAB>length, one row per sentence."""
    utils.write_tsv(path, ((i, r.score, r.length) for i, r in enumerate(results)))


# ─── Alternation diagnostics ──────────────────────────────────────────────────

def _symbol_class(symbol: str) -> str:
    return "tag" if symbol == "</s>" or is_tag(symbol) else "word"


def class_agreement(model: TranslationModel, corpus: Sequence[Sequence[str]],
                    outputs: Sequence[Sequence[str]]) -> Tuple[int, int]:
    """
    (agreeing, total) output positions, </s> included, where the model's
    unmasked top-1 symbol has the same class (tag or word) as the symbol
    actually emitted.
    """
    vocab = model.tgt_vocab
    agree, total = 0, 0
    for src, out in zip(corpus, outputs):
        emitted = vocab.encode(out) + [vocab.eos_id]
        memory = model.encode(src)
        logp = np.array([model.next_log_probs(memory, [emitted[:t]])[0] for t in range(len(emitted))],
                        dtype=float)
        logp[:, :2] = -np.inf  # never <pad> or <s>
        top = logp.argmax(axis=1)
        for t, sym in enumerate(emitted):
            total += 1
            agree += _symbol_class(vocab.itos[int(top[t])]) == _symbol_class(vocab.itos[sym])
    return agree, total


def alternation_positions(stream: Sequence[str]) -> Tuple[int, int]:
    """
    (consistent, total) positions. A position is consistent when its class
    is the one the alternation expects there; the expectation then follows
    the token actually seen.
    """
    consistent = 0
    expect_tag = True
    for tok in stream:
        tag = is_tag(tok)
        consistent += tag == expect_tag
        expect_tag = False if tag else not tok.endswith(MARKER)
    return consistent, len(stream)


def alternation_rate(streams: Sequence[Sequence[str]]) -> float:
    consistent, total = 0, 0
    for stream in streams:
        c, n = alternation_positions(stream)
        consistent += c
        total += n
    rate = consistent / total if total else 1.0
    logger.info(f"Tag/word alternation holds at {rate:.1%} of {total} output positions.")
    return rate
