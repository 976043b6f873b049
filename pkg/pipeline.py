"""
Experiment runner — one run directory per experiment:
  1. prep       corpora (synthetic or files), truecasing, filtering, downsampling
  2. annotate   tag interleaving for the configured arm
  3. bpe        per-language merge tables, applied to every split
  4. train      model training + checkpoint selection on dev BLEU
  5. translate  beam search on the test set, tags stripped for scoring
  6. eval       BLEU, alternation rate, bootstrap against the baseline run
  7. errcat     error categories and relative change against the baseline run
  8. forced     forced-decoding accuracies (target-tag arms only)
Every stage outcome is recorded in manifest.tsv as soon as it is known.
"""
from __future__ import annotations

import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from loguru import logger

import config
import decode
import errcat
import evaluation
import nmt
import synthetic
import textproc
import utils
from annotate import (
    AnnotatedSentence, AnnotatedToken, align_annotations, count_tag_collisions,
    interleave, is_tag, read_conllu, strip_tags, tag_pos, write_conllu,
)
from bpe import bpe_apply, bpe_learn, bpe_undo, save_bpe
from errors import ConfigError, DataError, StageError
from experiment import ExperimentConfig, GridSpace, apply_grid_point, save_config, render_value

STAGES = ("prep", "annotate", "bpe", "train", "translate", "eval", "errcat", "forced")
SPLITS = ("train", "dev", "test")


@dataclass
class Split:
    src: List[List[str]]
    tgt: List[List[str]]
    src_ann: Optional[List[AnnotatedSentence]] = None
    tgt_ann: Optional[List[AnnotatedSentence]] = None
    src_stream: List[List[str]] = field(default_factory=list)
    tgt_stream: List[List[str]] = field(default_factory=list)
    src_bpe: List[List[str]] = field(default_factory=list)
    tgt_bpe: List[List[str]] = field(default_factory=list)


class Manifest:
    """key<TAB>value rows, rewritten on every update."""

    def __init__(self, path: str):
        self.path = path
        self.rows: Dict[str, str] = {}

    def set(self, key: str, value):
        self.rows[key] = str(value)
        utils.write_tsv(self.path, self.rows.items())


def read_manifest(path: str) -> Dict[str, str]:
    return {row[0]: row[1] for row in utils.read_tsv(path)}


# ─── Run ──────────────────────────────────────────────────────────────────────

class ExperimentRun:
    def __init__(self, cfg: ExperimentConfig, run_dir: str, threads: Optional[int] = None):
        self.cfg = cfg
        self.run_dir = run_dir
        self.threads = threads or config.THREADS
        self.src_kind, self.tgt_kind = cfg.tag_kinds
        self.splits: Dict[str, Split] = {}
        self.checkpoint: Optional[nmt.Checkpoint] = None
        self.results: List[decode.BeamResult] = []
        self.hyps: List[List[str]] = []
        self.lemma_table: Dict[str, str] = {}
        self.manifest = Manifest(self.path("manifest.tsv"))

    def path(self, *parts: str) -> str:
        return os.path.join(self.run_dir, *parts)

    def run(self, stages: Sequence[str] = STAGES) -> str:
        self.cfg.check_paths()
        os.makedirs(self.run_dir, exist_ok=True)
        config_hash = save_config(self.cfg, self.path("config.txt"))
        self.manifest.set("config_sha256", config_hash)
        self.manifest.set("seed", self.cfg.seed)
        self.manifest.set("arm", self.cfg.arm)

        for name in stages:
            key = f"stage.{name}"
            if name == "forced" and (self.tgt_kind is None or not self.cfg.forced):
                self.manifest.set(key, "skipped")
                continue
            logger.info(f"[{self.cfg.arm}] stage {name}…")
            try:
                getattr(self, f"stage_{name}")()
            except Exception as exc:
                self.manifest.set(key, f"failed: {exc}")
                logger.error(f"[{self.cfg.arm}] stage {name} failed: {exc}")
                raise StageError(name, exc) from exc
            self.manifest.set(key, "completed")
            logger.success(f"[{self.cfg.arm}] stage {name} completed")
        return self.run_dir

    # ─── 1. prep ──────────────────────────────────────────────────────────

    def stage_prep(self):
        if self.cfg.source == "synthetic":
            self._prep_synthetic()
        else:
            self._prep_files()

        for name, split in self.splits.items():
            utils.write_token_lines(self.path("corpus", f"{name}.src"), split.src)
            utils.write_token_lines(self.path("corpus", f"{name}.tgt"), split.tgt)
            for side, ann in (("src", split.src_ann), ("tgt", split.tgt_ann)):
                if ann is not None:
                    with open(self.path("corpus", f"{name}.{side}.conllu"), "w", encoding="utf-8", newline="\n") as f:
                        f.write(write_conllu(ann))
        sizes = ", ".join(f"{n} {len(s.src)}" for n, s in self.splits.items())
        logger.info(f"Corpus sizes: {sizes}")

    def _prep_synthetic(self):
        cfg = self.cfg
        parts = synthetic.synth_splits(cfg.seed, cfg.synthetic_train, cfg.synthetic_dev, cfg.synthetic_test)
        for name, examples in zip(SPLITS, parts):
            if name == "train" and cfg.downsample is not None:
                keep = {p.id for p in textproc.downsample([ex.pair for ex in examples], cfg.downsample, cfg.seed)}
                examples = [ex for ex in examples if ex.pair.id in keep]
            self.splits[name] = Split(
                src=[list(ex.pair.src) for ex in examples],
                tgt=[list(ex.pair.tgt) for ex in examples],
                src_ann=[ex.src for ex in examples],
                tgt_ann=[ex.tgt for ex in examples],
            )

    def _prep_files(self):
        cfg = self.cfg
        pairs: Dict[str, List[textproc.SentencePair]] = {}
        anns: Dict[str, Dict[str, Dict[int, AnnotatedSentence]]] = defaultdict(dict)

        for name in SPLITS:
            src = [textproc.tokenize(l) for l in textproc.read_corpus(cfg.corpus[f"{name}_src"])]
            tgt = [textproc.tokenize(l) for l in textproc.read_corpus(cfg.corpus[f"{name}_tgt"])]
            split_pairs = textproc.make_pairs(src, tgt)
            keep = set(p.id for p in split_pairs)
            for side in ("src", "tgt"):
                path = cfg.annotation.get(f"{name}_{side}")
                if not path:
                    continue
                lines = [p.src if side == "src" else p.tgt for p in split_pairs]
                aligned, _ = align_annotations(lines, read_conllu(path))
                anns[name][side] = {i: a for i, a in enumerate(aligned) if a is not None}
                needed = (side == "src" and self.src_kind) or (side == "tgt" and self.tgt_kind)
                if needed:
                    keep &= set(anns[name][side])
            pairs[name] = [p for p in split_pairs if p.id in keep]

        truecasers = {
            "src": textproc.learn_truecaser(p.src for p in pairs["train"]),
            "tgt": textproc.learn_truecaser(p.tgt for p in pairs["train"]),
        }
        for side, model in truecasers.items():
            textproc.save_truecaser(model, self.path("corpus", f"truecase.{side}.tsv"))

        for name in SPLITS:
            split_pairs = pairs[name]
            if cfg.truecase:
                split_pairs = [
                    textproc.SentencePair(
                        tuple(textproc.truecase(truecasers["src"], p.src)),
                        tuple(textproc.truecase(truecasers["tgt"], p.tgt)),
                        p.id,
                    )
                    for p in split_pairs
                ]
            if name == "train":
                before = len(split_pairs)
                split_pairs = textproc.filter_pairs(split_pairs, cfg.max_len)
                logger.info(f"Length filter kept {len(split_pairs)}/{before} training pairs")
                if cfg.downsample is not None:
                    split_pairs = textproc.downsample(split_pairs, cfg.downsample, cfg.seed)
            elif any(not p.src or not p.tgt for p in split_pairs):
                raise DataError(f"{name} corpus contains empty lines")

            def annotations(side: str) -> Optional[List[AnnotatedSentence]]:
                table = anns[name].get(side)
                if table is None or any(p.id not in table for p in split_pairs):
                    return None
                return [
                    AnnotatedSentence([replace(tok, form=form) for tok, form in
                                       zip(table[p.id].tokens, p.src if side == "src" else p.tgt)])
                    for p in split_pairs
                ]

            self.splits[name] = Split(
                src=[list(p.src) for p in split_pairs],
                tgt=[list(p.tgt) for p in split_pairs],
                src_ann=annotations("src"),
                tgt_ann=annotations("tgt"),
            )

    # ─── 2. annotate ──────────────────────────────────────────────────────

    def stage_annotate(self):
        count_tag_collisions(self.splits["train"].src + self.splits["train"].tgt)
        for name, split in self.splits.items():
            split.src_stream = (
                [interleave(a, self.src_kind) for a in split.src_ann] if self.src_kind else split.src
            )
            split.tgt_stream = (
                [interleave(a, self.tgt_kind) for a in split.tgt_ann] if self.tgt_kind else split.tgt
            )
            utils.write_token_lines(self.path("corpus", f"{name}.in.src"), split.src_stream)
            utils.write_token_lines(self.path("corpus", f"{name}.in.tgt"), split.tgt_stream)

        # target-side lemmas for error classification
        ann = self.splits["train"].tgt_ann
        if self.cfg.source == "files" and ann:
            counts: Dict[str, Counter] = defaultdict(Counter)
            for sent in ann:
                for tok in sent.tokens:
                    counts[tok.form][tok.lemma] += 1
            self.lemma_table = {form: min(c, key=lambda l: (-c[l], l)) for form, c in counts.items()}

    # ─── 3. bpe ───────────────────────────────────────────────────────────

    def stage_bpe(self):
        train = self.splits["train"]
        src_model = bpe_learn(train.src, self.cfg.bpe_src_ops)
        tgt_model = bpe_learn(train.tgt, self.cfg.bpe_tgt_ops)
        save_bpe(src_model, self.path("bpe", "src.merges"))
        save_bpe(tgt_model, self.path("bpe", "tgt.merges"))
        for name, split in self.splits.items():
            split.src_bpe = [bpe_apply(s, src_model) for s in split.src_stream]
            split.tgt_bpe = [bpe_apply(t, tgt_model) for t in split.tgt_stream]
            utils.write_token_lines(self.path("bpe", f"{name}.src"), split.src_bpe)
            utils.write_token_lines(self.path("bpe", f"{name}.tgt"), split.tgt_bpe)

    # ─── 4. train ─────────────────────────────────────────────────────────

    def stage_train(self):
        train, dev = self.splits["train"], self.splits["dev"]
        self.checkpoint = nmt.train(
            self.cfg.training, self.cfg.model,
            train.src_bpe, train.tgt_bpe, dev.src_bpe, dev.tgt_bpe,
            src_tag_kind=self.src_kind, tgt_tag_kind=self.tgt_kind,
        )
        nmt.save_checkpoint(self.checkpoint, self.path("model", "model.pt"))
        utils.write_tsv(
            self.path("reports", "training.tsv"),
            self.checkpoint.history,
            header=("step", "dev_ppl", "dev_bleu"),
        )

    def translator(self) -> nmt.Translator:
        if self.checkpoint is None:
            self.checkpoint = nmt.load_checkpoint(self.path("model", "model.pt"))
        return nmt.Translator.from_checkpoint(self.checkpoint)

    # ─── 5. translate ─────────────────────────────────────────────────────

    def stage_translate(self):
        test = self.splits["test"]
        self.results = decode.batch_decode(
            self.translator(), test.src_bpe, decode.Free(), beam=self.cfg.beam, threads=self.threads
        )
        raw = [r.tokens for r in self.results]
        self.hyps = [bpe_undo(strip_tags(r)) for r in raw]
        utils.write_token_lines(self.path("translations", "test.raw"), raw)
        if self.tgt_kind:
            utils.write_token_lines(self.path("translations", "test.tagged"), [bpe_undo(r) for r in raw])
        utils.write_token_lines(self.path("translations", "test.hyp"), self.hyps)
        decode.write_scores(self.path("translations", "test.scores"), self.results)

    # ─── 6. eval ──────────────────────────────────────────────────────────

    def stage_eval(self):
        refs = self.splits["test"].tgt
        report = evaluation.bleu(self.hyps, refs)
        metrics: Dict[str, Optional[float]] = {
            "bleu": report.score,
            "brevity_penalty": report.brevity_penalty,
            "hyp_len": report.hyp_len,
            "ref_len": report.ref_len,
            "dev_bleu": self.checkpoint.dev_bleu if self.checkpoint else None,
        }
        for n, p in enumerate(report.precisions, start=1):
            metrics[f"precision_{n}"] = p
        if self.tgt_kind:
            metrics["alternation_rate"] = decode.alternation_rate([r.tokens for r in self.results])

        baseline = self._baseline_path("translations", "test.hyp")
        if baseline:
            base_hyps = utils.read_token_lines(baseline)
            result = evaluation.paired_bootstrap(
                self.hyps, base_hyps, refs, iters=self.cfg.bootstrap_iters, seed=self.cfg.seed
            )
            metrics.update({
                "bootstrap.baseline_bleu": result.bleu_b,
                "bootstrap.wins_system": result.wins_a,
                "bootstrap.wins_baseline": result.wins_b,
                "bootstrap.ties": result.ties,
                "bootstrap.p_value": result.p_value_a,
                "bootstrap.significant_better": int(result.verdict == "A"),
                "bootstrap.significant_worse": int(result.verdict == "B"),
            })
        evaluation.write_metric_report(self.path("reports", "metrics.tsv"), metrics)
        logger.info(f"Test BLEU {report.score:.2f}")

    def _baseline_path(self, *parts: str) -> Optional[str]:
        if not self.cfg.baseline_run:
            return None
        path = os.path.join(self.cfg.baseline_run, *parts)
        if not os.path.exists(path):
            raise DataError(f"baseline run has no {os.path.join(*parts)}")
        return path

    # ─── 7. errcat ────────────────────────────────────────────────────────

    def _lemmatise(self, tokens: Sequence[str]) -> List[AnnotatedToken]:
        if self.cfg.source == "synthetic":
            return synthetic.analyse_target(tokens)
        return [AnnotatedToken(t, self.lemma_table.get(t, t.lower()), "X") for t in tokens]

    def stage_errcat(self):
        test = self.splits["test"]
        if test.tgt_ann is not None:
            refs = [a.tokens for a in test.tgt_ann]
        else:
            refs = [self._lemmatise(t) for t in test.tgt]
        hyps = [self._lemmatise(h) for h in self.hyps]
        totals = errcat.corpus_error_totals(hyps, refs)

        change = None
        baseline = self._baseline_path("reports", "errors.tsv")
        if baseline:
            change = errcat.relative_change(totals, read_error_counts(baseline))
        errcat.write_error_report(self.path("reports", "errors.tsv"), [(self.cfg.arm, totals, change)])
        rates = errcat.error_rates(totals, sum(len(r) for r in refs))
        evaluation.write_metric_report(self.path("reports", "error_rates.tsv"), rates)
        logger.info(f"Errors: {totals.as_dict()}")

    # ─── 8. forced ────────────────────────────────────────────────────────

    def stage_forced(self):
        test = self.splits["test"]
        refs = test.tgt_bpe
        translator = self.translator()
        freqs = Counter(w for sent in self.splits["train"].tgt for w in sent)
        max_len = decode.reference_max_len(refs)
        buckets: List[Tuple[str, str, Optional[float]]] = []

        def forced(constraints, system: str, target: str, keep: Optional[List[int]] = None):
            keep = list(range(len(refs))) if keep is None else keep
            results = decode.batch_decode(
                translator, [test.src_bpe[i] for i in keep], [constraints[i] for i in keep],
                beam=self.cfg.beam, threads=self.threads, max_len=max_len,
            )
            outputs = [r.tokens for r in results]
            report = evaluation.bucket_accuracy(outputs, [refs[i] for i in keep], target, freqs)
            buckets.extend(evaluation.bucket_rows(f"{self.cfg.arm}:{system}", report))
            return report, outputs

        tags = [[t for t in r if is_tag(t)] for r in refs]
        units = [[t for t in r if not is_tag(t)] for r in refs]
        metrics: Dict[str, Optional[float]] = {}

        report, _ = forced([decode.ForceTags(tuple(t)) for t in tags], "force_tags", "surface_forms")
        metrics["surface_accuracy.force_tags"] = report.overall
        report, outputs = forced([decode.ForceWords(tuple(u)) for u in units], "force_words", "tags")
        metrics["tag_accuracy.force_words"] = report.overall
        if self.tgt_kind in ("POS", "MSD"):
            metrics["pos_accuracy.force_words"] = evaluation.prediction_accuracy(outputs, refs, "pos").overall
        if self.tgt_kind == "MSD":
            pos = [tuple(tag_pos(t) for t in ts) for ts in tags]
            known = set(decode.SymbolClasses(translator.tgt_vocab).by_pos)
            keep = [i for i, p in enumerate(pos) if set(p) <= known]
            if len(keep) < len(pos):
                logger.warning(f"{len(pos) - len(keep)} test sentence(s) need a POS without vocabulary tags; "
                               f"left out of POS-restricted decoding")
            report, _ = forced([decode.RestrictPOS(p) for p in pos], "restrict_pos", "surface_forms", keep)
            metrics["surface_accuracy.restrict_pos"] = report.overall

        agree, total = decode.class_agreement(translator, test.src_bpe, [r.tokens for r in self.results])
        metrics["class_agreement"] = agree / total if total else None
        unmasked = decode.batch_translate(
            translator, test.src_bpe, decode.Free(class_mask=False), beam=self.cfg.beam, threads=self.threads
        )
        metrics["alternation_rate.unmasked"] = decode.alternation_rate(unmasked)

        evaluation.write_metric_report(self.path("reports", "forced.tsv"), metrics)
        evaluation.write_bucket_report(self.path("reports", "buckets.tsv"), buckets)


def read_error_counts(path: str) -> errcat.ErrorCounts:
    """First arm's absolute counts from an errors.tsv report."""
    values: Dict[str, int] = {}
    for row in utils.read_tsv(path, skip_header=True):
        _, category, count = row[:3]
        if category in errcat.CATEGORIES and category not in values:
            values[category] = int(count)
    missing = set(errcat.CATEGORIES) - set(values)
    if missing:
        raise DataError(f"{path} lacks error categories {sorted(missing)}")
    return errcat.ErrorCounts(**values)


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None,
                   threads: Optional[int] = None) -> str:
    """Runs every stage in order and returns the run directory."""
    run_dir = out_dir or os.path.join(config.RUNS_DIR, f"{cfg.pair}-{cfg.arm}-seed{cfg.seed}")
    return ExperimentRun(cfg, run_dir, threads).run()


# ─── Grid search ──────────────────────────────────────────────────────────────

def dev_bleu_of(cfg: ExperimentConfig, run_dir: str, threads: Optional[int] = None) -> float:
    """Trains one grid point and returns the selected checkpoint's dev BLEU."""
    run = ExperimentRun(cfg, run_dir, threads)
    run.run(stages=("prep", "annotate", "bpe", "train"))
    return run.checkpoint.dev_bleu


def grid_search(
    space: GridSpace,
    base_cfg: ExperimentConfig,
    out_dir: str,
    evaluate: Optional[Callable[[ExperimentConfig, str], float]] = None,
    threads: Optional[int] = None,
) -> Tuple[ExperimentConfig, List[Tuple[str, str, float]]]:
    """
    Staged search: BPE operations, then tied embeddings, then model sizes.
    Each stage keeps the earlier winners fixed; ties keep the earlier point.
    Returns the winning config and the ranking rows (stage, value, dev BLEU).
    """
    if base_cfg.arm != "none":
        raise ConfigError(f"grid search runs on the baseline arm, got {base_cfg.arm!r}")
    space.validate(base_cfg.model.family)
    evaluate = evaluate or (lambda cfg, run_dir: dev_bleu_of(cfg, run_dir, threads))

    best = base_cfg
    ranking: List[Tuple[str, str, float]] = []
    for stage, values in space.stages:
        winner, winner_score = None, None
        for k, value in enumerate(values):
            candidate = apply_grid_point(best, stage, value)
            score = evaluate(candidate, os.path.join(out_dir, f"{stage}-{k}"))
            ranking.append((stage, render_value(value), score))
            logger.info(f"grid {stage}={render_value(value)}: dev BLEU {score:.2f}")
            if winner_score is None or score > winner_score:
                winner, winner_score = candidate, score
        best = winner
        logger.success(f"grid stage {stage} fixed at {render_value(_stage_value(best, stage))}")

    utils.write_tsv(os.path.join(out_dir, "ranking.tsv"), ranking, header=("stage", "value", "dev_bleu"))
    save_config(best, os.path.join(out_dir, "best_config.txt"))
    return best, ranking


def _stage_value(cfg: ExperimentConfig, stage: str):
    if stage == "bpe_ops":
        return cfg.bpe_src_ops
    if stage == "tied":
        return cfg.model.tied_embeddings
    return cfg.model.sizes
