"""``breakdown-lab`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 invalid input (bad flags, missing files, malformed data),
2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import torch

from .config import ConfigError, parse_overrides, validate_config
from .data import (
    DataError,
    ExtractStats,
    example_from_json,
    extract_reddit_pairs,
    load_examples,
    load_pairs,
    pair_to_json,
    read_jsonl,
    write_jsonl,
)
from .evaluation import (
    EvalError,
    ensemble_average,
    evaluate,
    parse_base,
    read_predictions,
    select_top_k,
    write_predictions,
)
from .finetune import predict, run_finetune
from .model import ModelError, load_checkpoint, save_checkpoint
from .pretrain import run_pretrain
from .ssmba import AugmentConfig, Strategy, augment_dataset, write_augmented
from .tokenizer import TokenizerError, Vocab, encode, encode_pair, train_wordpiece

logger = logging.getLogger("breakdown_lab")

INPUT_ERRORS = (ConfigError, DataError, EvalError, ModelError, TokenizerError, FileNotFoundError)
THREADS_ENV = "BREAKDOWN_LAB_THREADS"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _require(*paths: str | None) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"{p}: no such file or directory")


def _config(args, need_inputs: bool = False):
    overrides = parse_overrides(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("run", {})["seed"] = str(args.seed)
    return validate_config(getattr(args, "config", None), overrides, need_inputs=need_inputs)


# -- subcommands -----------------------------------------------------------


def cmd_tok_train(args) -> int:
    _require(*args.corpus)

    def lines():
        for path in args.corpus:
            with open(path, encoding="utf-8") as f:
                yield from f

    vocab = train_wordpiece(lines(), args.vocab_size, args.min_freq)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} pieces to {args.out}")
    return 0


def cmd_tok_encode(args) -> int:
    _require(args.vocab)
    vocab = Vocab.load(args.vocab)
    for line in sys.stdin:
        line = line.rstrip("\n")
        if args.pair:
            context, _, utterance = line.partition("\t")
            enc = encode_pair(vocab, context, utterance, args.max_len, pad=not args.no_pad)
            print(json.dumps({
                "token_ids": list(enc.token_ids),
                "segment_ids": list(enc.segment_ids),
                "attention_mask": list(enc.attention_mask),
                "length": enc.length,
            }))
        else:
            print(" ".join(str(i) for i in encode(vocab, line)))
    return 0


def cmd_extract_reddit(args) -> int:
    _require(args.dump)
    stats = ExtractStats()
    with open(args.dump, encoding="utf-8") as f:
        write_jsonl(args.out, (pair_to_json(p) for p in extract_reddit_pairs(f, args.limit, args.capacity, stats)))
    print(f"pairs={stats.pairs} lines={stats.lines} skipped={stats.skipped} dropped={stats.dropped}")
    return 0


def cmd_pretrain(args) -> int:
    _require(args.pairs, args.vocab, args.config)
    cfg = _config(args)
    vocab = Vocab.load(args.vocab)
    plan = cfg.pretrain_plan()
    plan = replace(plan, epochs=args.epochs if args.epochs is not None else plan.epochs, init=args.init)
    if plan.init.startswith("warm:"):
        _require(plan.init[len("warm:"):])
    pairs = load_pairs(args.pairs)
    if cfg.pretrain.pairs_limit:
        pairs = pairs[: cfg.pretrain.pairs_limit]
    log = args.log or str(Path(args.out).with_suffix(".loss.csv"))
    result = run_pretrain(plan, cfg.model_config(len(vocab)), pairs, vocab, cfg.mask, log)
    save_checkpoint(result.model, args.out, vocab.sha256())
    print(f"epoch losses: first {result.epoch_losses[0]:.4f} final {result.epoch_losses[-1]:.4f}")
    return 0


def cmd_finetune(args) -> int:
    _require(args.train, args.augmented, args.valid, args.init, args.vocab, args.config)
    cfg = _config(args)
    vocab = Vocab.load(args.vocab)
    model, _ = load_checkpoint(args.init, vocab_sha256=vocab.sha256())
    train = load_examples(args.train)
    if args.augmented:
        # the augmented file repeats the originals; only its pseudo-labelled rows are added
        extra = [row for row in read_jsonl(args.augmented) if row.get("pseudo") is not None]
        train = train + [example_from_json(row) for row in extra]
    valid = load_examples(args.valid)
    plan = cfg.finetune_plan(cfg.run.seed, augmented=bool(args.augmented))
    log = args.log or str(Path(args.out).with_suffix(".log.csv"))
    result = run_finetune(plan, model, train, valid, vocab, log)
    save_checkpoint(model, args.out, vocab.sha256())
    print(f"best step {result.best_step}")
    print(result.best_report.table())
    return 0


def cmd_predict(args) -> int:
    _require(args.ckpt, args.vocab, args.data)
    vocab = Vocab.load(args.vocab)
    model, _ = load_checkpoint(args.ckpt, vocab_sha256=vocab.sha256())
    write_predictions(args.out, predict(model, load_examples(args.data), vocab))
    return 0


def cmd_augment(args) -> int:
    _require(args.train, args.teacher, args.recon, args.vocab)
    vocab = Vocab.load(args.vocab)
    teacher, _ = load_checkpoint(args.teacher, vocab_sha256=vocab.sha256())
    recon, _ = load_checkpoint(args.recon, vocab_sha256=vocab.sha256())
    try:
        strategy = Strategy.parse(args.strategy, args.temperature)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = AugmentConfig(args.select_prob, args.num_aug, strategy, args.label, args.seed)
    errs = cfg.errors("--")
    if errs:
        raise UsageError("; ".join(errs))
    originals, augments = augment_dataset(load_examples(args.train), teacher, recon, vocab, cfg)
    write_augmented(args.out, originals, augments)
    print(f"wrote {len(originals) + len(augments)} rows ({len(augments)} augments)")
    return 0


def cmd_eval(args) -> int:
    _require(args.pred, args.gold)
    report = evaluate(read_predictions(args.pred), load_examples(args.gold), parse_base(args.base))
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    print(json.dumps(report.to_json()))
    print(report.table())
    return 0


def cmd_ensemble(args) -> int:
    _require(args.valid, *args.members, *(args.apply or []))
    if args.apply and len(args.apply) != len(args.members):
        raise UsageError("--apply needs one file per --members entry")
    valid = load_examples(args.valid)
    members = [read_predictions(p) for p in args.members]
    reports = [evaluate(m, valid) for m in members]
    chosen = select_top_k(list(zip(range(len(members)), reports)), args.metric, min(args.top, len(members)))
    print("selected:", ", ".join(args.members[i] for i in chosen))
    if args.apply:
        write_predictions(args.out, ensemble_average([read_predictions(args.apply[i]) for i in chosen]))
    else:
        averaged = ensemble_average([members[i] for i in chosen])
        write_predictions(args.out, averaged)
        print(evaluate(averaged, valid).table())
    return 0


def cmd_pipeline(args) -> int:
    _require(args.config)
    from .pipeline import run_pipeline

    cfg = _config(args, need_inputs=True)
    result = run_pipeline(cfg, args.out)
    print((result.out_dir / "report.txt").read_text(encoding="utf-8"), end="")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import write_config_for, write_corpus

    corpus = write_corpus(args.out, args.dialogues, args.reddit_pairs, seed=args.seed)
    cfg_path = write_config_for(corpus)
    print(f"wrote synthetic corpus to {corpus.root}; pipeline config at {cfg_path}")
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="breakdown-lab", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help=f"torch threads (fallback: ${THREADS_ENV}, then 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    tok = sub.add_parser("tok", help="train or apply a WordPiece vocabulary")
    toksub = tok.add_subparsers(dest="tok_command", required=True, parser_class=Parser)
    t = toksub.add_parser("train")
    t.add_argument("--corpus", nargs="+", required=True)
    t.add_argument("--vocab-size", type=int, default=8000)
    t.add_argument("--min-freq", type=int, default=1)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_tok_train)
    t = toksub.add_parser("encode", help="encode stdin lines (context<TAB>utterance with --pair)")
    t.add_argument("--vocab", required=True)
    t.add_argument("--pair", action="store_true")
    t.add_argument("--max-len", type=int, default=128)
    t.add_argument("--no-pad", action="store_true")
    t.set_defaults(func=cmd_tok_encode)

    s = sub.add_parser("extract-reddit", help="stream parent/child comment pairs out of a dump")
    s.add_argument("--dump", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--capacity", type=int, default=1_000_000)
    s.set_defaults(func=cmd_extract_reddit)

    s = sub.add_parser("pretrain", help="MLM pre-training on comment pairs")
    s.add_argument("--pairs", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--init", default="scratch", help="scratch or warm:PATH")
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.add_argument("--log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("augment", help="SSMBA augmentation of a training set")
    s.add_argument("--train", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--recon", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--num-aug", type=int, default=2)
    s.add_argument("--select-prob", type=float, default=0.45)
    s.add_argument("--strategy", default="sample", help="sample, greedy or topk:K")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--label", choices=("soft", "hard"), default="soft")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("finetune", help="KL fine-tuning with best-checkpoint selection")
    s.add_argument("--train", required=True)
    s.add_argument("--augmented")
    s.add_argument("--valid", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.add_argument("--log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("predict", help="write a prediction file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="score a prediction file")
    s.add_argument("--pred", required=True)
    s.add_argument("--gold", required=True)
    s.add_argument("--base", default="2", choices=("2", "e"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ensemble", help="average the top-k members ranked on validation")
    s.add_argument("--members", nargs="+", required=True, help="validation prediction files")
    s.add_argument("--valid", required=True)
    s.add_argument("--top", type=int, default=4)
    s.add_argument("--metric", default="accuracy", choices=("accuracy", "f1_macro", "f1_breakdown", "js_div"))
    s.add_argument("--apply", nargs="+", help="per-member prediction files to average instead (same order)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("pipeline", help="run the full recipe into one output directory")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("synth", help="generate the synthetic corpus and its pipeline config")
    s.add_argument("--out", required=True)
    s.add_argument("--dialogues", type=int, default=2000)
    s.add_argument("--reddit-pairs", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def set_threads(flag: int | None) -> int:
    threads = flag if flag is not None else int(os.environ.get(THREADS_ENV, "1"))
    torch.set_num_threads(max(1, threads))
    return threads


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
