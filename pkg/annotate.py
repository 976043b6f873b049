"""
Word-level linguistic annotations and tag interleaving.

A tag is rendered per word and inserted immediately before it:
  DUM → "<dum>"
  POS → universal POS                       e.g. "ADV"
  MSD → POS + "_" + sorted features          e.g. "PRON_Case=Nom|Number=Sing"
        (no features → POS + "__",           e.g. "ADV__")

Tags are recognised by grammar, not by position, so strip_tags tolerates
model output that breaks the tag/word alternation.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

from loguru import logger

from errors import DataError, ParseError

DUM_SYMBOL = "<dum>"
TAG_KINDS = ("DUM", "POS", "MSD")

UPOS_TAGS = frozenset({
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
    "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
})

_UPOS_ALT = "|".join(sorted(UPOS_TAGS))
_FEATURE = r"[A-Za-z0-9\[\]]+=[A-Za-z0-9,]+"
_RE_POS = re.compile(rf"^(?:{_UPOS_ALT})$")
_RE_MSD = re.compile(rf"^(?:{_UPOS_ALT})_(?:_|{_FEATURE}(?:\|{_FEATURE})*)$")


# ─── Types ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AnnotatedToken:
    form: str
    lemma: str
    upos: str
    feats: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.form:
            raise DataError("annotated token with empty form")
        names = [name for name, _ in self.feats]
        if len(names) != len(set(names)):
            raise DataError(f"duplicate feature names in {self.feats!r}")


@dataclass(frozen=True)
class Tag:
    kind: str
    payload: str


@dataclass
class AnnotatedSentence:
    tokens: List[AnnotatedToken] = field(default_factory=list)

    @property
    def forms(self) -> List[str]:
        return [t.form for t in self.tokens]


def parse_feats(column: str) -> Tuple[Tuple[str, str], ...]:
    """'Case=Nom|Number=Sing' → sorted ((Case, Nom), (Number, Sing)); '_' → ()."""
    if column in ("_", ""):
        return ()
    pairs = []
    for item in column.split("|"):
        name, sep, value = item.partition("=")
        if not sep or not name or not value:
            raise DataError(f"malformed feature {item!r}")
        pairs.append((name, value))
    return tuple(sorted(pairs))


# ─── CoNLL-U ──────────────────────────────────────────────────────────────────

def parse_conllu(stream: str) -> List[AnnotatedSentence]:
    """
    One AnnotatedSentence per blank-line separated block.
    Multiword ranges ("3-4") and empty nodes ("5.1") are skipped in favour of
    their word lines. Raises ParseError with the offending line number.
    """
    sentences: List[AnnotatedSentence] = []
    current: List[AnnotatedToken] = []
    coerced = 0

    def flush():
        if current:
            sentences.append(AnnotatedSentence(list(current)))
            current.clear()

    for line_no, line in enumerate(stream.splitlines(), start=1):
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ParseError(f"expected 10 tab-separated columns, got {len(cols)}", line_no)
        token_id = cols[0]
        if "-" in token_id or "." in token_id:
            continue
        if not token_id.isdigit():
            raise ParseError(f"bad token id {token_id!r}", line_no)
        if int(token_id) != len(current) + 1:
            raise ParseError(
                f"non-contiguous token id {token_id} (expected {len(current) + 1})", line_no
            )
        form, lemma, upos, feats = cols[1], cols[2], cols[3], cols[5]
        if upos not in UPOS_TAGS:
            coerced += 1
            upos = "X"
        try:
            current.append(AnnotatedToken(form, lemma, upos, parse_feats(feats)))
        except DataError as exc:
            raise ParseError(str(exc), line_no) from exc
    flush()

    if coerced:
        logger.warning(f"{coerced} token(s) with a non-universal POS were mapped to X.")
    return sentences


def read_conllu(path: str) -> List[AnnotatedSentence]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_conllu(f.read())


def write_conllu(sentences: Iterable[AnnotatedSentence]) -> str:
    blocks = []
    for sent in sentences:
        lines = [f"# text = {' '.join(sent.forms)}"]
        for i, tok in enumerate(sent.tokens, start=1):
            feats = "|".join(f"{k}={v}" for k, v in tok.feats) or "_"
            lines.append("\t".join([str(i), tok.form, tok.lemma or "_", tok.upos, "_",
                                    feats, "_", "_", "_", "_"]))
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def align_annotations(
    token_lines: Sequence[Sequence[str]],
    annotated: Sequence[AnnotatedSentence],
) -> Tuple[List[Optional[AnnotatedSentence]], int]:
    """
    Requires a 1-to-1 token match between tokenised text and tagger output.
    Mismatched lines are replaced by None and counted.
    """
    if len(token_lines) != len(annotated):
        raise DataError(
            f"annotation file has {len(annotated)} sentences for {len(token_lines)} text lines"
        )
    kept: List[Optional[AnnotatedSentence]] = []
    rejected = 0
    for tokens, sent in zip(token_lines, annotated):
        if list(tokens) == sent.forms:
            kept.append(sent)
        else:
            kept.append(None)
            rejected += 1
    if rejected:
        logger.warning(f"Rejected {rejected} line(s) whose tagger tokenisation differs from the text.")
    return kept, rejected


# ─── Tags ─────────────────────────────────────────────────────────────────────

def render_tag(tok: AnnotatedToken, kind: str) -> Tag:
    if kind == "DUM":
        return Tag("DUM", DUM_SYMBOL)
    if kind == "POS":
        return Tag("POS", tok.upos)
    if kind == "MSD":
        feats = "|".join(f"{k}={v}" for k, v in sorted(tok.feats))
        return Tag("MSD", f"{tok.upos}_{feats or '_'}")
    raise ValueError(f"unknown tag kind {kind!r}")


def is_tag(token: str) -> bool:
    return token == DUM_SYMBOL or bool(_RE_POS.match(token)) or bool(_RE_MSD.match(token))


def tag_pos(tag: str) -> Optional[str]:
    """POS prefix of a POS or MSD tag; None for DUM and non-tags."""
    if _RE_POS.match(tag):
        return tag
    if _RE_MSD.match(tag):
        return tag.split("_", 1)[0]
    return None


def interleave(sent: AnnotatedSentence, kind: str) -> List[str]:
    stream: List[str] = []
    for tok in sent.tokens:
        stream.append(render_tag(tok, kind).payload)
        stream.append(tok.form)
    return stream


def strip_tags(stream: Sequence[str]) -> List[str]:
    return [tok for tok in stream if not is_tag(tok)]


def count_tag_collisions(sentences: Iterable[Sequence[str]]) -> int:
    """Surface tokens that parse as tags (they will be lost by strip_tags)."""
    collisions = sum(1 for tokens in sentences for tok in tokens if is_tag(tok))
    if collisions:
        logger.warning(f"{collisions} surface token(s) collide with the tag grammar and will be stripped.")
    return collisions


def split_interleaved(stream: Sequence[str]) -> List[Tuple[str, str]]:
    """tag₁ w₁ tag₂ w₂ … → [(tag₁, w₁), …]. Raises DataError if it does not alternate."""
    if len(stream) % 2:
        raise DataError(f"interleaved stream has odd length {len(stream)}")
    blocks = []
    for i in range(0, len(stream), 2):
        tag, word = stream[i], stream[i + 1]
        if not is_tag(tag) or is_tag(word):
            raise DataError(f"stream does not alternate tag/word at position {i}: {tag!r} {word!r}")
        blocks.append((tag, word))
    return blocks
