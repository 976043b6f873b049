"""
Interleave-MT — command-line entrypoint.

Pipeline subcommands (each reads and writes plain files):
  prep         tokenise, truecase, filter and downsample a parallel corpus
  synth        generate the synthetic language pair (train/dev/test)
  annotate     interleave CoNLL-U annotations as DUM/POS/MSD tags
  bpe-learn    learn a merge table
  bpe-apply    segment a corpus, tags untouched
  train        train a model and save the selected checkpoint
  translate    beam search, optionally constrained
  eval-bleu    corpus BLEU
  eval-signif  paired bootstrap between two systems
  errcat       error categories against an annotated reference
  forced-eval  tag / surface-form / POS accuracy under forced decoding
  grid         staged hyper-parameter search on the baseline arm
  run          full experiment into a run directory

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence.
"""
from __future__ import annotations

import argparse
import os
import sys
from collections import Counter
from dataclasses import replace
from typing import List, Optional

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
    AnnotatedToken, TAG_KINDS, interleave, is_tag, read_conllu, strip_tags, tag_pos, write_conllu,
)
from bpe import bpe_apply, bpe_learn, bpe_undo, load_bpe, save_bpe
from errors import ConfigError, DataError, DivergenceError, StageError
from experiment import ExperimentConfig, GridSpace, load_config, load_flat
import pipeline

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
# unexpected errors inside a pipeline stage
EXIT_FAILURE = EXIT_USAGE


# ─── Loguru setup ─────────────────────────────────────────────────────────────

def setup_logging():
    logger.remove()  # Remove default handler
    logger.add(
        sys.stderr,
        level=config.LOG_LEVEL,
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}",
    )
    if config.LOG_TO_FILE:
        logger.add(
            os.path.join(config.LOG_DIR, "interleave_mt.log"),
            rotation="10 MB",
            retention="30 days",
            level="DEBUG",
            encoding="utf-8",
            format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{line} | {message}",
        )


# ─── Argument parsing ─────────────────────────────────────────────────────────

class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, default):
    parser.add_argument("--seed", type=int, default=default, help="Random seed (overrides the config)")
    parser.add_argument("--config", default=default, help="Experiment config (key = value or YAML)")
    parser.add_argument("--out-dir", default=default, help="Output directory")
    parser.add_argument("--threads", type=int, default=default, help="Sentence-level decoding threads")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="interleave-mt", description="NMT with interleaved linguistic tags")
    _global_flags(parser, None)
    common = ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.set_defaults(handler=globals()["cmd_" + name.replace("-", "_")])
        return p

    p = add("prep", "Prepare a parallel corpus")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--max-len", type=int, default=100)
    p.add_argument("--downsample", type=int)
    p.add_argument("--no-truecase", action="store_true")
    p.add_argument("--pretokenized", action="store_true", help="input is already space-separated tokens")

    p = add("synth", "Generate the synthetic language pair")
    p.add_argument("--train", type=int, default=5000)
    p.add_argument("--dev", type=int, default=200)
    p.add_argument("--test", type=int, default=200)

    p = add("annotate", "Interleave CoNLL-U annotations as tags")
    p.add_argument("--conllu", required=True)
    p.add_argument("--kind", choices=TAG_KINDS, required=True)
    p.add_argument("--output", required=True)

    p = add("bpe-learn", "Learn BPE merges")
    p.add_argument("--input", required=True)
    p.add_argument("--ops", type=int, required=True)
    p.add_argument("--output", required=True)

    p = add("bpe-apply", "Apply BPE merges (tags untouched)")
    p.add_argument("--merges", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = add("train", "Train a model on BPE-segmented streams")
    for name in ("--train-src", "--train-tgt", "--dev-src", "--dev-tgt"):
        p.add_argument(name, required=True)
    p.add_argument("--output", help="Checkpoint path (default: <out-dir>/model.pt)")

    p = add("translate", "Translate a BPE-segmented source file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=config.DEFAULT_BEAM)
    p.add_argument("--constraint", choices=("free", "force-tags", "force-words", "restrict-pos"), default="free")
    p.add_argument("--reference", help="Interleaved, segmented reference (constrained modes)")
    p.add_argument("--no-class-mask", action="store_true", help="Free mode without the tag/word mask")
    p.add_argument("--keep-tags", action="store_true", help="Write raw output (tags and sub-words)")
    p.add_argument("--scores", help="Per-sentence score sidecar")

    p = add("eval-bleu", "Corpus BLEU")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--report")

    p = add("eval-signif", "Paired bootstrap resampling")
    p.add_argument("--hyp-a", required=True)
    p.add_argument("--hyp-b", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.05)

    p = add("errcat", "Word-level error categories")
    p.add_argument("--hyp", required=True, help="Tokenised hypotheses")
    p.add_argument("--ref", required=True, help="CoNLL-U reference (forms and lemmas)")
    p.add_argument("--hyp-conllu", help="CoNLL-U lemmas for the hypotheses")
    p.add_argument("--synthetic", action="store_true", help="Lemmatise hypotheses with the synthetic analyser")
    p.add_argument("--baseline", help="errors.tsv of the baseline system")
    p.add_argument("--arm", default="system")
    p.add_argument("--report")

    p = add("forced-eval", "Accuracy under forced decoding")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="Segmented source")
    p.add_argument("--reference", required=True, help="Interleaved, segmented reference")
    p.add_argument("--train-ref", help="Training target (for frequency buckets)")
    p.add_argument("--mode", choices=("force-tags", "force-words", "restrict-pos"), required=True)
    p.add_argument("--beam", type=int, default=config.DEFAULT_BEAM)
    p.add_argument("--report")

    add("grid", "Staged grid search on the baseline arm")
    add("run", "Run a full experiment")
    return parser


# ─── Helpers ──────────────────────────────────────────────────────────────────

def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args) -> str:
    out = args.out_dir or "."
    os.makedirs(out, exist_ok=True)
    return out


def _seed(args) -> int:
    return args.seed if args.seed is not None else config.DEFAULT_SEED


def _constraints(mode: str, refs: List[List[str]]):
    if mode == "force-tags":
        return [decode.ForceTags(tuple(t for t in r if is_tag(t))) for r in refs]
    if mode == "force-words":
        return [decode.ForceWords(tuple(t for t in r if not is_tag(t))) for r in refs]
    return [decode.RestrictPOS(tuple(tag_pos(t) for t in r if is_tag(t))) for r in refs]


# ─── Subcommands ──────────────────────────────────────────────────────────────

def cmd_prep(args):
    out = _out_dir(args)
    split = str.split if args.pretokenized else textproc.tokenize
    src = [split(l) for l in textproc.read_corpus(args.src)]
    tgt = [split(l) for l in textproc.read_corpus(args.tgt)]
    pairs = textproc.make_pairs(src, tgt)
    if not args.no_truecase:
        models = (textproc.learn_truecaser(p.src for p in pairs), textproc.learn_truecaser(p.tgt for p in pairs))
        textproc.save_truecaser(models[0], os.path.join(out, "truecase.src.tsv"))
        textproc.save_truecaser(models[1], os.path.join(out, "truecase.tgt.tsv"))
        pairs = [
            textproc.SentencePair(tuple(textproc.truecase(models[0], p.src)),
                                  tuple(textproc.truecase(models[1], p.tgt)), p.id)
            for p in pairs
        ]
    pairs = textproc.filter_pairs(pairs, args.max_len)
    if args.downsample is not None:
        pairs = textproc.downsample(pairs, args.downsample, _seed(args))
    utils.write_token_lines(os.path.join(out, "corpus.src"), (p.src for p in pairs))
    utils.write_token_lines(os.path.join(out, "corpus.tgt"), (p.tgt for p in pairs))
    utils.write_tsv(os.path.join(out, "corpus.ids"), ((p.id,) for p in pairs))
    logger.success(f"Prepared {len(pairs)} sentence pairs in {out}")


def cmd_synth(args):
    out = _out_dir(args)
    splits = synthetic.synth_splits(_seed(args), args.train, args.dev, args.test)
    for name, examples in zip(pipeline.SPLITS, splits):
        for side in ("src", "tgt"):
            sents = [getattr(ex, side) for ex in examples]
            utils.write_token_lines(os.path.join(out, f"{name}.{side}"), (s.forms for s in sents))
            with open(os.path.join(out, f"{name}.{side}.conllu"), "w", encoding="utf-8", newline="\n") as f:
                f.write(write_conllu(sents))
    logger.success(f"Synthetic corpus written to {out}")


def cmd_annotate(args):
    sentences = read_conllu(args.conllu)
    utils.write_token_lines(args.output, (interleave(s, args.kind) for s in sentences))
    logger.success(f"Interleaved {len(sentences)} sentences with {args.kind} tags → {args.output}")


def cmd_bpe_learn(args):
    model = bpe_learn(utils.read_token_lines(args.input), args.ops)
    save_bpe(model, args.output)
    logger.success(f"Learned {len(model.merges)} merges → {args.output}")


def cmd_bpe_apply(args):
    model = load_bpe(args.merges)
    utils.write_token_lines(args.output, (bpe_apply(s, model) for s in utils.read_token_lines(args.input)))


def cmd_train(args):
    cfg = _experiment_config(args)
    src_kind, tgt_kind = cfg.tag_kinds
    ckpt = nmt.train(
        cfg.training, cfg.model,
        utils.read_token_lines(args.train_src), utils.read_token_lines(args.train_tgt),
        utils.read_token_lines(args.dev_src), utils.read_token_lines(args.dev_tgt),
        src_tag_kind=src_kind, tgt_tag_kind=tgt_kind,
    )
    path = args.output or os.path.join(_out_dir(args), "model.pt")
    nmt.save_checkpoint(ckpt, path)
    logger.success(f"Checkpoint (step {ckpt.step}, dev BLEU {ckpt.dev_bleu:.2f}) → {path}")


def cmd_translate(args):
    translator = nmt.Translator.from_checkpoint(nmt.load_checkpoint(args.model))
    src = utils.read_token_lines(args.input)
    kwargs = {}
    if args.constraint == "free":
        constraint = decode.Free(class_mask=not args.no_class_mask)
    else:
        if not args.reference:
            raise ConfigError(f"--constraint {args.constraint} needs --reference")
        refs = utils.read_token_lines(args.reference)
        constraint = _constraints(args.constraint, refs)
        kwargs["max_len"] = decode.reference_max_len(refs)
    results = decode.batch_decode(translator, src, constraint, beam=args.beam, threads=args.threads, **kwargs)
    raw = [r.tokens for r in results]
    lines = raw if args.keep_tags else [bpe_undo(strip_tags(r)) for r in raw]
    utils.write_token_lines(args.output, lines)
    if args.scores:
        decode.write_scores(args.scores, results)
    logger.success(f"Translated {len(src)} sentences → {args.output}")


def cmd_eval_bleu(args):
    report = evaluation.bleu(utils.read_token_lines(args.hyp), utils.read_token_lines(args.ref))
    print(f"BLEU = {report.score:.2f} "
          f"({'/'.join(f'{100 * p:.1f}' for p in report.precisions)}, BP = {report.brevity_penalty:.3f}, "
          f"hyp_len = {report.hyp_len}, ref_len = {report.ref_len})")
    if args.report:
        metrics = {"bleu": report.score, "brevity_penalty": report.brevity_penalty,
                   "hyp_len": report.hyp_len, "ref_len": report.ref_len}
        metrics.update({f"precision_{n}": p for n, p in enumerate(report.precisions, start=1)})
        evaluation.write_metric_report(args.report, metrics)


def cmd_eval_signif(args):
    result = evaluation.paired_bootstrap(
        utils.read_token_lines(args.hyp_a), utils.read_token_lines(args.hyp_b),
        utils.read_token_lines(args.ref), iters=args.iters, alpha=args.alpha, seed=_seed(args),
    )
    print(f"A = {result.bleu_a:.2f}  B = {result.bleu_b:.2f}  wins A/B/tie = "
          f"{result.wins_a}/{result.wins_b}/{result.ties}  p(A) = {result.p_value_a:.4f}  "
          f"p(B) = {result.p_value_b:.4f}  verdict = {result.verdict}")


def cmd_errcat(args):
    refs = [s.tokens for s in read_conllu(args.ref)]
    hyp_lines = utils.read_token_lines(args.hyp)
    if args.hyp_conllu:
        hyps = [s.tokens for s in read_conllu(args.hyp_conllu)]
    elif args.synthetic:
        hyps = [synthetic.analyse_target(h) for h in hyp_lines]
    else:
        counts = {}
        for sent in refs:
            for tok in sent:
                counts.setdefault(tok.form, Counter())[tok.lemma] += 1
        table = {form: min(c, key=lambda l: (-c[l], l)) for form, c in counts.items()}
        hyps = [[AnnotatedToken(w, table.get(w, w.lower()), "X") for w in h] for h in hyp_lines]
    totals = errcat.corpus_error_totals(hyps, refs)
    change = errcat.relative_change(totals, pipeline.read_error_counts(args.baseline)) if args.baseline else None
    for category, count in totals.as_dict().items():
        print(f"{category}\t{count}")
    if args.report:
        errcat.write_error_report(args.report, [(args.arm, totals, change)])


def cmd_forced_eval(args):
    translator = nmt.Translator.from_checkpoint(nmt.load_checkpoint(args.model))
    src = utils.read_token_lines(args.input)
    refs = utils.read_token_lines(args.reference)
    freqs = evaluation.word_frequencies(utils.read_token_lines(args.train_ref)) if args.train_ref else None
    results = decode.batch_decode(
        translator, src, _constraints(args.mode, refs), beam=args.beam, threads=args.threads,
        max_len=decode.reference_max_len(refs),
    )
    outputs = [r.tokens for r in results]
    targets = {"force-tags": ("surface_forms",), "force-words": ("tags", "pos"), "restrict-pos": ("surface_forms",)}
    rows = []
    for target in targets[args.mode]:
        report = evaluation.bucket_accuracy(outputs, refs, target, freqs)
        print(f"{target}\tall={report.overall}\tinfrequent={report.infrequent}\toov={report.oov}")
        rows.extend(evaluation.bucket_rows(f"{args.mode}:{target}", report))
    if args.report:
        evaluation.write_bucket_report(args.report, rows)


def cmd_grid(args):
    if not args.config:
        raise ConfigError("grid needs --config")
    cfg = _experiment_config(args)
    space = GridSpace.from_flat(load_flat(args.config), cfg.model.family)
    best, ranking = pipeline.grid_search(
        space, cfg, args.out_dir or os.path.join(config.RUNS_DIR, "grid"), threads=args.threads
    )
    for stage, value, score in ranking:
        print(f"{stage}\t{value}\t{score:.2f}")


def cmd_run(args):
    cfg = _experiment_config(args)
    run_dir = pipeline.run_experiment(cfg, args.out_dir, threads=args.threads)
    print(run_dir)


# ─── Entrypoint ───────────────────────────────────────────────────────────────

def exit_code(exc: BaseException) -> int:
    """Stage failures map through the exception that stopped the stage."""
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, DivergenceError):
        return EXIT_DIVERGED
    if isinstance(cause, ConfigError):
        return EXIT_USAGE
    if isinstance(cause, (DataError, ValueError, OSError)):
        return EXIT_DATA
    if isinstance(exc, StageError):
        logger.opt(exception=cause).debug(f"stage {exc.stage} raised {type(cause).__name__}")
        return EXIT_FAILURE
    raise exc


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        args.handler(args)
    except (StageError, DivergenceError, ConfigError, DataError, ValueError, OSError) as exc:
        code = exit_code(exc)
        logger.error(f"{args.command} failed: {exc}")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
