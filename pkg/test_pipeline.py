import os
import statistics
from dataclasses import replace

import pytest

import decode
import errcat
import pipeline
import synthetic
from annotate import is_tag, read_conllu
from errors import ConfigError, DataError, StageError
from experiment import ExperimentConfig, GridSpace
from nmt import ModelConfig, TrainingConfig
import utils


def tiny_config(**overrides) -> ExperimentConfig:
    values = dict(
        synthetic_train=60, synthetic_dev=6, synthetic_test=6,
        bpe_src_ops=30, bpe_tgt_ops=30, beam=2, bootstrap_iters=20,
        model=ModelConfig(family="transformer", model_dim=16, layers=1, heads=2),
        training=TrainingConfig(warmup_steps=10, validate_every=5, patience=2, max_steps=10, max_tokens=300),
    )
    values.update(overrides)
    return ExperimentConfig(**values)


def read(path):
    with open(path, encoding="utf-8") as f:
        return f.read()


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    base = pipeline.run_experiment(tiny_config(), str(root / "base"))
    tagged = pipeline.run_experiment(tiny_config(arm="TL-POS", forced=False, baseline_run=base),
                                     str(root / "tl-pos"))
    return {"root": root, "base": base, "tagged": tagged}


# ─── Synthetic runs ───────────────────────────────────────────────────────────

def test_manifest_records_every_stage(runs):
    manifest = pipeline.read_manifest(os.path.join(runs["base"], "manifest.tsv"))
    for stage in pipeline.STAGES[:-1]:
        assert manifest[f"stage.{stage}"] == "completed"
    assert manifest["stage.forced"] == "skipped"
    assert manifest["arm"] == "none"
    assert manifest["config_sha256"] == utils.calculate_file_hash(os.path.join(runs["base"], "config.txt"))


def test_run_layout(runs):
    for rel in ("corpus/train.src", "corpus/test.tgt.conllu", "corpus/dev.in.tgt", "bpe/src.merges",
                "bpe/test.tgt", "model/model.pt", "reports/training.tsv", "translations/test.hyp",
                "translations/test.scores", "reports/metrics.tsv", "reports/errors.tsv",
                "reports/error_rates.tsv"):
        assert os.path.exists(os.path.join(runs["base"], rel)), rel
    assert not os.path.exists(os.path.join(runs["base"], "translations", "test.tagged"))


def test_config_round_trips_through_run_dir(runs):
    saved = ExperimentConfig.from_text(read(os.path.join(runs["base"], "config.txt")))
    assert saved == tiny_config()


def test_target_tags_are_stripped_for_scoring(runs):
    raw = utils.read_token_lines(os.path.join(runs["tagged"], "translations", "test.raw"))
    hyp = utils.read_token_lines(os.path.join(runs["tagged"], "translations", "test.hyp"))
    assert len(raw) == len(hyp) == 6
    for stream in raw:
        consistent, total = decode.alternation_positions(stream)
        assert consistent == total
    assert not any(is_tag(t) for line in hyp for t in line)
    assert os.path.exists(os.path.join(runs["tagged"], "translations", "test.tagged"))


def test_interleaved_training_stream(runs):
    tgt = utils.read_token_lines(os.path.join(runs["tagged"], "corpus", "train.in.tgt"))
    plain = utils.read_token_lines(os.path.join(runs["tagged"], "corpus", "train.tgt"))
    for stream, words in zip(tgt, plain):
        assert len(stream) == 2 * len(words)
        assert all(is_tag(t) for t in stream[::2])


def test_baseline_comparison_reports(runs):
    metrics = dict(utils.read_tsv(os.path.join(runs["tagged"], "reports", "metrics.tsv"), skip_header=True))
    assert "bootstrap.p_value" in metrics
    assert float(metrics["alternation_rate"]) == 1.0
    rows = utils.read_tsv(os.path.join(runs["tagged"], "reports", "errors.tsv"), skip_header=True)
    assert {r[0] for r in rows} == {"TL-POS"}
    assert len(rows) == len(errcat.REPORT_CATEGORIES)
    base_metrics = dict(utils.read_tsv(os.path.join(runs["base"], "reports", "metrics.tsv"), skip_header=True))
    assert "bootstrap.p_value" not in base_metrics
    assert "alternation_rate" not in base_metrics


def test_rerun_reproduces_metrics(runs):
    again = pipeline.run_experiment(tiny_config(), str(runs["root"] / "base-again"))
    for rel in ("reports/metrics.tsv", "reports/errors.tsv", "translations/test.hyp", "reports/training.tsv"):
        assert read(os.path.join(again, rel)) == read(os.path.join(runs["base"], rel)), rel


def test_forced_stage_for_msd_arm(tmp_path):
    run_dir = pipeline.run_experiment(tiny_config(arm="TL-MSD"), str(tmp_path / "tl-msd"))
    manifest = pipeline.read_manifest(os.path.join(run_dir, "manifest.tsv"))
    assert manifest["stage.forced"] == "completed"
    forced = dict(utils.read_tsv(os.path.join(run_dir, "reports", "forced.tsv"), skip_header=True))
    for key in ("surface_accuracy.force_tags", "tag_accuracy.force_words", "pos_accuracy.force_words",
                "surface_accuracy.restrict_pos", "class_agreement", "alternation_rate.unmasked"):
        assert key in forced
    buckets = utils.read_tsv(os.path.join(run_dir, "reports", "buckets.tsv"), skip_header=True)
    assert {r[0] for r in buckets} == {"TL-MSD:force_tags", "TL-MSD:force_words", "TL-MSD:restrict_pos"}


# ─── File corpora ─────────────────────────────────────────────────────────────

def write_corpus(tmp_path, dev_src="the dog runs .\n"):
    texts = {
        "train_src": "The dog runs .\nthe cat sleeps .\na dog sleeps .\nthe cat runs .\n",
        "train_tgt": "miku yurdi .\nsaba tuldi .\nmiku tuldi .\nsaba yurdi .\n",
        "dev_src": dev_src,
        "dev_tgt": "miku yurdi .\nsaba tuldi .\n",
        "test_src": "a cat runs .\n",
        "test_tgt": "saba yurdi .\n",
    }
    paths = {}
    for name, text in texts.items():
        path = tmp_path / f"{name}.txt"
        path.write_text(text, encoding="utf-8")
        paths[name] = str(path)
    return paths


def test_file_corpora_preparation(tmp_path):
    cfg = tiny_config(source="files", corpus=write_corpus(tmp_path, "the dog runs .\nthe cat sleeps .\n"))
    run = pipeline.ExperimentRun(cfg, str(tmp_path / "run"))
    run.run(stages=("prep", "annotate", "bpe"))
    manifest = pipeline.read_manifest(run.path("manifest.tsv"))
    assert [manifest[f"stage.{s}"] for s in ("prep", "annotate", "bpe")] == ["completed"] * 3
    assert os.path.exists(run.path("corpus", "truecase.src.tsv"))
    assert len(utils.read_token_lines(run.path("corpus", "train.src"))) == 4
    assert utils.read_token_lines(run.path("corpus", "test.tgt")) == [["saba", "yurdi", "."]]


def test_stage_failure_is_recorded(tmp_path):
    cfg = tiny_config(source="files", corpus=write_corpus(tmp_path, "the dog runs .\n\n"))
    run = pipeline.ExperimentRun(cfg, str(tmp_path / "run"))
    with pytest.raises(StageError) as info:
        run.run()
    assert info.value.stage == "prep"
    assert isinstance(info.value.cause, DataError)
    manifest = pipeline.read_manifest(run.path("manifest.tsv"))
    assert manifest["stage.prep"].startswith("failed:")
    assert "stage.annotate" not in manifest


def test_missing_inputs_fail_before_any_stage(tmp_path):
    cfg = tiny_config(source="files", corpus=write_corpus(tmp_path))
    cfg.corpus["test_tgt"] = str(tmp_path / "missing.txt")
    with pytest.raises(ConfigError):
        pipeline.ExperimentRun(cfg, str(tmp_path / "run")).run()
    assert not os.path.exists(tmp_path / "run" / "manifest.tsv")


def test_read_error_counts(tmp_path):
    path = str(tmp_path / "errors.tsv")
    counts = errcat.ErrorCounts(inflection=3, extra=1)
    errcat.write_error_report(path, [("none", counts, None)])
    assert pipeline.read_error_counts(path) == counts
    utils.write_tsv(path, [("none", "inflection", 3)], header=("arm", "category", "count", "relative_change"))
    with pytest.raises(DataError):
        pipeline.read_error_counts(path)


# ─── Grid search ──────────────────────────────────────────────────────────────

SPACE = GridSpace(bpe_ops=(100, 200, 400), tied=(True, False), sizes=((32, 1, 2), (16, 1, 2)))


def test_grid_search_stages_and_winner(tmp_path):
    seen = []

    def evaluate(cfg, run_dir):
        seen.append(os.path.basename(run_dir))
        return cfg.bpe_src_ops / 100 + (0 if cfg.model.tied_embeddings else 1) + cfg.model.model_dim / 16

    best, ranking = pipeline.grid_search(SPACE, tiny_config(), str(tmp_path), evaluate=evaluate)
    assert len(ranking) == 3 + 2 + 2
    assert seen[:3] == ["bpe_ops-0", "bpe_ops-1", "bpe_ops-2"]
    assert (best.bpe_src_ops, best.bpe_tgt_ops) == (400, 400)
    assert best.model.tied_embeddings is False
    assert best.model.sizes == (32, 1, 2)
    assert ranking[3] == ("tied", "true", pytest.approx(4 + 0 + 1))
    rows = utils.read_tsv(str(tmp_path / "ranking.tsv"), skip_header=True)
    assert [r[1] for r in rows][-2:] == ["[32, 1, 2]", "[16, 1, 2]"]
    assert ExperimentConfig.from_text(read(str(tmp_path / "best_config.txt"))) == best


def test_grid_search_ties_keep_the_earlier_point(tmp_path):
    best, _ = pipeline.grid_search(SPACE, tiny_config(), str(tmp_path), evaluate=lambda cfg, d: 1.0)
    assert best.bpe_src_ops == 100
    assert best.model.tied_embeddings is True
    assert best.model.sizes == (32, 1, 2)


def test_single_point_grid_returns_base(tmp_path):
    base = tiny_config(bpe_src_ops=50, bpe_tgt_ops=50)
    space = GridSpace(bpe_ops=(50,), tied=(True,), sizes=(base.model.sizes,))
    best, ranking = pipeline.grid_search(space, base, str(tmp_path), evaluate=lambda cfg, d: 3.0)
    assert best == base
    assert len(ranking) == 3


def test_grid_search_requires_baseline_arm(tmp_path):
    with pytest.raises(ConfigError):
        pipeline.grid_search(SPACE, tiny_config(arm="TL-MSD"), str(tmp_path), evaluate=lambda cfg, d: 0.0)


def test_grid_point_trains_for_real(tmp_path):
    space = GridSpace(bpe_ops=(20,), tied=(True,), sizes=((16, 1, 2),))
    best, ranking = pipeline.grid_search(space, tiny_config(), str(tmp_path))
    assert 0.0 <= ranking[0][2] <= 100.0
    manifest = pipeline.read_manifest(str(tmp_path / "bpe_ops-0" / "manifest.tsv"))
    assert manifest["stage.train"] == "completed"
    assert "stage.translate" not in manifest


@pytest.mark.slow
def test_toy_baseline_reaches_high_bleu(tmp_path):
    cfg = tiny_config(
        synthetic_train=5000, synthetic_dev=200, synthetic_test=200, bpe_src_ops=200, bpe_tgt_ops=200,
        beam=5, model=ModelConfig(family="transformer", model_dim=64, layers=2, heads=4),
        training=TrainingConfig(warmup_steps=400, validate_every=200, patience=5, max_steps=4000,
                                max_tokens=2000),
    )
    run_dir = pipeline.run_experiment(cfg, str(tmp_path / "toy"))
    metrics = dict(utils.read_tsv(os.path.join(run_dir, "reports", "metrics.tsv"), skip_header=True))
    assert float(metrics["bleu"]) >= 90.0
    tagged = pipeline.run_experiment(replace(cfg, arm="TL-MSD", baseline_run=run_dir), str(tmp_path / "msd"))
    forced = dict(utils.read_tsv(os.path.join(tagged, "reports", "forced.tsv"), skip_header=True))
    assert float(forced["alternation_rate.unmasked"]) >= 0.99


def inflection_errors(run_dir: str) -> int:
    hyps = utils.read_token_lines(os.path.join(run_dir, "translations", "test.hyp"))
    refs = [s.tokens for s in read_conllu(os.path.join(run_dir, "corpus", "test.tgt.conllu"))]
    return errcat.corpus_error_totals([synthetic.analyse_target(h) for h in hyps], refs).inflection


@pytest.mark.slow
def test_msd_tags_do_not_add_inflection_errors(tmp_path):
    cfg = tiny_config(
        synthetic_train=5000, synthetic_dev=200, synthetic_test=200, bpe_src_ops=200, bpe_tgt_ops=200,
        beam=5, forced=False, model=ModelConfig(family="transformer", model_dim=64, layers=2, heads=4),
        training=TrainingConfig(warmup_steps=400, validate_every=200, patience=5, max_steps=4000,
                                max_tokens=2000),
    )
    base, msd = [], []
    for seed in (1, 2, 3):
        base_dir = pipeline.run_experiment(replace(cfg, seed=seed), str(tmp_path / f"base-{seed}"))
        msd_dir = pipeline.run_experiment(replace(cfg, seed=seed, arm="TL-MSD"), str(tmp_path / f"msd-{seed}"))
        base.append(inflection_errors(base_dir))
        msd.append(inflection_errors(msd_dir))
    assert statistics.median(msd) <= statistics.median(base)
