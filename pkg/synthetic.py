"""
Desk-scale synthetic language pair.

Source: SVO, English-like, determiners, plural -s, verb agreement / past.
Target: SOV, agglutinative, no determiners.
  noun = lemma + number suffix + case suffix   (miku + lar + ni → "mikularni")
  verb = lemma + tense suffix + agreement      (mir + di + lar  → "mirdilar")
Translation is a deterministic function of the source, so a model can reach
near-perfect accuracy; analyse_target_word inverts the target morphology.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from annotate import AnnotatedSentence, AnnotatedToken
from textproc import SentencePair

# ─── Lexicon ──────────────────────────────────────────────────────────────────

# source singular → (source plural, target lemma)
NOUNS: Dict[str, Tuple[str, str]] = {
    "cat": ("cats", "miku"),
    "dog": ("dogs", "hasa"),
    "bird": ("birds", "tori"),
    "farmer": ("farmers", "nolo"),
    "teacher": ("teachers", "sensa"),
    "river": ("rivers", "kawa"),
    "house": ("houses", "ieko"),
    "tree": ("trees", "kiba"),
    "king": ("kings", "osama"),
    "horse": ("horses", "umano"),
    "garden": ("gardens", "niwa"),
    "book": ("books", "hono"),
}

# source base → (3sg present, past, target lemma)
VERBS: Dict[str, Tuple[str, str, str]] = {
    "see": ("sees", "saw", "mir"),
    "chase": ("chases", "chased", "kov"),
    "find": ("finds", "found", "bul"),
    "help": ("helps", "helped", "yard"),
    "love": ("loves", "loved", "sev"),
    "watch": ("watches", "watched", "izl"),
    "carry": ("carries", "carried", "tas"),
    "feed": ("feeds", "fed", "bes"),
}

ADJECTIVES: Dict[str, str] = {
    "big": "buyu", "small": "kuci", "old": "eski",
    "red": "kizi", "happy": "mutlu", "green": "yesi",
}

ADVERBS: Dict[str, str] = {"today": "bugun", "often": "sikca", "quickly": "hizla"}

# preposition → target case
PREPOSITIONS: Dict[str, str] = {"in": "Loc", "to": "Dat"}

NUMBER_SUFFIX = {"Sing": "", "Plur": "lar"}
CASE_SUFFIX = {"Nom": "", "Acc": "ni", "Dat": "ga", "Loc": "da"}
TENSE_SUFFIX = {"Pres": "ar", "Past": "di"}
AGREEMENT_SUFFIX = {"Sing": "", "Plur": "lar"}


@dataclass(frozen=True)
class SyntheticExample:
    pair: SentencePair
    src: AnnotatedSentence
    tgt: AnnotatedSentence


# ─── Target morphology (and its inverse) ──────────────────────────────────────

def noun_form(lemma: str, number: str, case: str) -> AnnotatedToken:
    form = lemma + NUMBER_SUFFIX[number] + CASE_SUFFIX[case]
    return AnnotatedToken(form, lemma, "NOUN", (("Case", case), ("Number", number)))


def verb_form(lemma: str, tense: str, number: str) -> AnnotatedToken:
    form = lemma + TENSE_SUFFIX[tense] + AGREEMENT_SUFFIX[number]
    feats = (("Number", number), ("Person", "3"), ("Tense", tense), ("VerbForm", "Fin"))
    return AnnotatedToken(form, lemma, "VERB", feats)


def _build_target_table() -> Dict[str, AnnotatedToken]:
    table: Dict[str, AnnotatedToken] = {}
    for _, lemma in NOUNS.values():
        for number in NUMBER_SUFFIX:
            for case in CASE_SUFFIX:
                tok = noun_form(lemma, number, case)
                table[tok.form] = tok
    for *_, lemma in VERBS.values():
        for tense in TENSE_SUFFIX:
            for number in AGREEMENT_SUFFIX:
                tok = verb_form(lemma, tense, number)
                table[tok.form] = tok
    for lemma in ADJECTIVES.values():
        table[lemma] = AnnotatedToken(lemma, lemma, "ADJ")
    for lemma in ADVERBS.values():
        table[lemma] = AnnotatedToken(lemma, lemma, "ADV")
    table["."] = AnnotatedToken(".", ".", "PUNCT")
    return table


TARGET_TABLE: Dict[str, AnnotatedToken] = _build_target_table()


def analyse_target_word(form: str) -> AnnotatedToken:
    """Inverse of the target morphology; unknown forms get lemma = form and POS X."""
    tok = TARGET_TABLE.get(form)
    if tok is None:
        return AnnotatedToken(form, form.lower(), "X")
    return tok


def analyse_target(tokens: Sequence[str]) -> List[AnnotatedToken]:
    return [analyse_target_word(t) for t in tokens]


# ─── Sentence generator ───────────────────────────────────────────────────────

def _pick(rng: np.random.Generator, options: Sequence[str]) -> str:
    return options[int(rng.integers(len(options)))]


def _noun_phrase(rng, case: str, allow_indefinite: bool = True):
    """Returns (source tokens, target tokens) for DET [ADJ] NOUN."""
    noun = _pick(rng, sorted(NOUNS))
    number = "Plur" if rng.random() < 0.35 else "Sing"
    plural, lemma = NOUNS[noun]

    det = "a" if (allow_indefinite and number == "Sing" and rng.random() < 0.3) else "the"
    definite = "Ind" if det == "a" else "Def"
    src = [AnnotatedToken(det, det, "DET", (("Definite", definite), ("PronType", "Art")))]
    tgt: List[AnnotatedToken] = []

    if rng.random() < 0.3:
        adj = _pick(rng, sorted(ADJECTIVES))
        src.append(AnnotatedToken(adj, adj, "ADJ", (("Degree", "Pos"),)))
        tgt.append(AnnotatedToken(ADJECTIVES[adj], ADJECTIVES[adj], "ADJ"))

    surface = plural if number == "Plur" else noun
    src.append(AnnotatedToken(surface, noun, "NOUN", (("Number", number),)))
    tgt.append(noun_form(lemma, number, case))
    return src, tgt, number


def _sentence(rng: np.random.Generator) -> Tuple[List[AnnotatedToken], List[AnnotatedToken]]:
    subj_src, subj_tgt, subj_number = _noun_phrase(rng, "Nom")

    verb = _pick(rng, sorted(VERBS))
    third_sing, past, vlemma = VERBS[verb]
    tense = "Past" if rng.random() < 0.5 else "Pres"
    if tense == "Past":
        vsurface = past
        vfeats = (("Mood", "Ind"), ("Tense", "Past"), ("VerbForm", "Fin"))
    elif subj_number == "Sing":
        vsurface = third_sing
        vfeats = (("Mood", "Ind"), ("Number", "Sing"), ("Person", "3"),
                  ("Tense", "Pres"), ("VerbForm", "Fin"))
    else:
        vsurface = verb
        vfeats = (("Mood", "Ind"), ("Tense", "Pres"), ("VerbForm", "Fin"))
    verb_src = AnnotatedToken(vsurface, verb, "VERB", vfeats)

    obj_src, obj_tgt, _ = _noun_phrase(rng, "Acc")

    pp_src: List[AnnotatedToken] = []
    pp_tgt: List[AnnotatedToken] = []
    if rng.random() < 0.4:
        prep = _pick(rng, sorted(PREPOSITIONS))
        np_src, np_tgt, _ = _noun_phrase(rng, PREPOSITIONS[prep], allow_indefinite=False)
        pp_src = [AnnotatedToken(prep, prep, "ADP")] + np_src
        pp_tgt = np_tgt

    adv_src: List[AnnotatedToken] = []
    adv_tgt: List[AnnotatedToken] = []
    if rng.random() < 0.3:
        adv = _pick(rng, sorted(ADVERBS))
        adv_src = [AnnotatedToken(adv, adv, "ADV")]
        adv_tgt = [AnnotatedToken(ADVERBS[adv], ADVERBS[adv], "ADV")]

    period = AnnotatedToken(".", ".", "PUNCT")
    src = subj_src + [verb_src] + obj_src + pp_src + adv_src + [period]
    tgt = subj_tgt + adv_tgt + pp_tgt + obj_tgt + [verb_form(vlemma, tense, subj_number), period]
    return src, tgt


def synth_corpus(seed: int, n: int) -> List[SyntheticExample]:
    """Deterministic corpus of n annotated sentence pairs."""
    if n < 1:
        raise ValueError(f"synthetic corpus size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n):
        src, tgt = _sentence(rng)
        pair = SentencePair(tuple(t.form for t in src), tuple(t.form for t in tgt), i)
        examples.append(SyntheticExample(pair, AnnotatedSentence(src), AnnotatedSentence(tgt)))
    return examples


def synth_splits(seed: int, n_train: int, n_dev: int, n_test: int):
    """
    Train/dev/test splits from derived seeds. Dev and test contain no source
    sentence seen in training (or in each other).
    """
    train = synth_corpus(seed, n_train)
    seen = {ex.pair.src for ex in train}
    held_out = []
    for offset, size in ((1, n_dev), (2, n_test)):
        chosen: List[SyntheticExample] = []
        batch = 0
        while len(chosen) < size:
            batch += 1
            if batch > 50:
                raise ValueError("could not draw enough unseen synthetic sentences")
            for ex in synth_corpus(seed * 1000 + offset * 100 + batch, size * 2):
                if ex.pair.src in seen or len(chosen) >= size:
                    continue
                seen.add(ex.pair.src)
                chosen.append(SyntheticExample(
                    SentencePair(ex.pair.src, ex.pair.tgt, len(chosen)), ex.src, ex.tgt))
        held_out.append(chosen)
    return train, held_out[0], held_out[1]
