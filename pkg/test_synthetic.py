import pytest

import synthetic
from annotate import interleave, is_tag, render_tag, strip_tags


def test_synth_corpus_is_deterministic():
    assert synthetic.synth_corpus(seed=1, n=3) == synthetic.synth_corpus(seed=1, n=3)
    assert synthetic.synth_corpus(seed=1, n=20) != synthetic.synth_corpus(seed=2, n=20)


def test_synth_corpus_rejects_empty_request():
    with pytest.raises(ValueError):
        synthetic.synth_corpus(seed=1, n=0)


def test_pairs_match_annotations():
    for ex in synthetic.synth_corpus(seed=3, n=200):
        assert list(ex.pair.src) == ex.src.forms
        assert list(ex.pair.tgt) == ex.tgt.forms
        assert ex.pair.src[-1] == ex.pair.tgt[-1] == "."
        assert not any(is_tag(w) for w in ex.pair.src + ex.pair.tgt)


def test_target_tags_render_for_every_kind():
    for ex in synthetic.synth_corpus(seed=4, n=100):
        for kind in ("DUM", "POS", "MSD"):
            tags = [render_tag(tok, kind).payload for tok in ex.tgt.tokens]
            assert all(is_tag(t) for t in tags)
            assert strip_tags(interleave(ex.tgt, kind)) == ex.tgt.forms


def test_target_morphology_inverts():
    for ex in synthetic.synth_corpus(seed=5, n=300):
        for tok in ex.tgt.tokens:
            assert synthetic.analyse_target_word(tok.form) == tok


def test_noun_and_verb_forms():
    noun = synthetic.noun_form("miku", "Plur", "Acc")
    assert noun.form == "mikularni"
    assert dict(noun.feats) == {"Case": "Acc", "Number": "Plur"}
    verb = synthetic.verb_form("mir", "Past", "Plur")
    assert verb.form == "mirdilar"
    assert verb.lemma == "mir"


def test_unknown_target_word():
    tok = synthetic.analyse_target_word("Zzz")
    assert (tok.form, tok.lemma, tok.upos) == ("Zzz", "zzz", "X")


def test_target_is_verb_final():
    for ex in synthetic.synth_corpus(seed=6, n=100):
        assert ex.tgt.tokens[-2].upos == "VERB"
        assert "DET" not in {t.upos for t in ex.tgt.tokens}


def test_synth_splits_hold_out_unseen_sources():
    train, dev, test = synthetic.synth_splits(seed=1, n_train=300, n_dev=20, n_test=20)
    assert (len(train), len(dev), len(test)) == (300, 20, 20)
    train_src = {ex.pair.src for ex in train}
    dev_src = {ex.pair.src for ex in dev}
    test_src = {ex.pair.src for ex in test}
    assert not train_src & dev_src
    assert not train_src & test_src
    assert not dev_src & test_src
    assert [ex.pair.id for ex in dev] == list(range(20))
