"""End-to-end recipe: vocab, Reddit pairs, continued pre-training, teacher fine-tuning,
augmentation, seeded fine-tuning reruns, top-k ensemble and evaluation.

Everything lands in one output directory. ``manifest.json`` and ``reports.json`` hold no
timestamps or absolute output paths, so identical config + seed reproduce them byte for
byte; wall-clock timings go to ``timings.json``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import RunConfig, write_config
from .data import (
    Example,
    ExtractStats,
    extract_reddit_pairs,
    load_examples,
    load_pairs,
    pair_to_json,
    save_examples,
    write_jsonl,
)
from .evaluation import (
    MetricReport,
    PredictionRecord,
    ensemble_average,
    evaluate,
    parse_base,
    select_top_k,
    write_predictions,
)
from .finetune import predict, run_finetune
from .model import load_checkpoint, save_checkpoint
from .pretrain import run_pretrain
from .ssmba import augment_dataset, write_augmented
from .tokenizer import Vocab, train_wordpiece

logger = logging.getLogger(__name__)


def sha256_path(path: str | Path) -> str:
    """Content hash of a file, or of every file under a directory (relative names included)."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        if path.is_dir():
            h.update(f.relative_to(path).as_posix().encode() + b"\0")
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def dump_json(path: Path, obj: object) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class PipelineResult:
    out_dir: Path
    manifest: dict
    reports: dict
    timings: dict[str, float] = field(default_factory=dict)


class _Stages:
    def __init__(self, out: Path):
        self.out = out
        self.outputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}

    def record(self, *paths: Path) -> None:
        for p in paths:
            self.outputs[p.relative_to(self.out).as_posix()] = sha256_path(p)

    def timed(self, name: str, start: float) -> None:
        self.timings[name] = round(time.perf_counter() - start, 3)
        logger.info("stage %s done in %.1fs", name, self.timings[name])


def reddit_pairs(cfg: RunConfig):
    if cfg.paths.pairs:
        pairs = load_pairs(cfg.paths.pairs)
        limit = cfg.pretrain.pairs_limit
        return (pairs[:limit] if limit else pairs), None
    stats = ExtractStats()
    with open(cfg.paths.reddit, encoding="utf-8") as f:
        pairs = list(
            extract_reddit_pairs(f, cfg.pretrain.pairs_limit or None, cfg.pretrain.fifo_capacity, stats)
        )
    return pairs, stats


def _predict_split(model, examples: Sequence[Example], vocab: Vocab, path: Path) -> list[PredictionRecord]:
    records = predict(model, examples, vocab)
    write_predictions(path, records)
    return records


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None) -> PipelineResult:
    out = Path(out_dir or cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    st = _Stages(out)
    seed = cfg.run.seed
    base = parse_base(cfg.run.js_base)
    write_config(replace(cfg, paths=replace(cfg.paths, output_dir=str(out))), out / "config.resolved.ini")

    t0 = time.perf_counter()
    train = load_examples(cfg.paths.train)
    valid = load_examples(cfg.paths.valid)
    test = load_examples(cfg.paths.test) if cfg.paths.test else []
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    for name, rows in (("train", train), ("valid", valid), ("test", test)):
        if rows:
            save_examples(data_dir / f"{name}.jsonl", rows)
            st.record(data_dir / f"{name}.jsonl")
    pairs, stats = reddit_pairs(cfg)
    if not pairs:
        raise ValueError("no reddit pairs extracted")
    write_jsonl(out / "reddit_pairs.jsonl", (pair_to_json(p) for p in pairs))
    st.record(out / "reddit_pairs.jsonl")
    st.timed("data", t0)

    t0 = time.perf_counter()
    if cfg.paths.vocab:
        vocab = Vocab.load(cfg.paths.vocab)
    else:
        corpus = [t for ex in train for t in (ex.context, ex.utterance)]
        corpus += [t for p in pairs for t in (p.parent_text, p.child_text)]
        vocab = train_wordpiece(corpus, cfg.tokenizer.vocab_size, cfg.tokenizer.min_frequency)
    vocab.save(out / "vocab.txt")
    st.record(out / "vocab.txt")
    st.timed("vocab", t0)

    # continued pre-training (scratch init unless paths.init names a warm start)
    t0 = time.perf_counter()
    model_cfg = cfg.model_config(len(vocab))
    pre = run_pretrain(cfg.pretrain_plan(), model_cfg, pairs, vocab, cfg.mask, out / "pretrain_loss.csv")
    pre_ckpt = out / "pretrain.ckpt"
    save_checkpoint(pre.model, pre_ckpt, vocab.sha256())
    st.record(pre_ckpt, out / "pretrain_loss.csv")
    st.timed("pretrain", t0)

    # teacher: fine-tuned on the original examples only
    t0 = time.perf_counter()
    teacher, _ = load_checkpoint(pre_ckpt, vocab_sha256=vocab.sha256())
    teacher_res = run_finetune(cfg.finetune_plan(seed), teacher, train, valid, vocab, out / "teacher_log.csv")
    save_checkpoint(teacher, out / "teacher.ckpt", vocab.sha256())
    teacher_valid = _predict_split(teacher, valid, vocab, out / "teacher_valid.jsonl")
    st.record(out / "teacher.ckpt", out / "teacher_log.csv", out / "teacher_valid.jsonl")
    teacher_test = None
    if test:
        teacher_test = _predict_split(teacher, test, vocab, out / "teacher_test.jsonl")
        st.record(out / "teacher_test.jsonl")
    st.timed("teacher", t0)

    t0 = time.perf_counter()
    recon, _ = load_checkpoint(pre_ckpt, vocab_sha256=vocab.sha256())
    originals, augments = augment_dataset(train, teacher, recon, vocab, cfg.augment_config())
    write_augmented(out / "augmented.jsonl", originals, augments)
    st.record(out / "augmented.jsonl")
    augmented = list(originals) + [a.as_example() for a in augments]
    st.timed("augment", t0)

    # seeded reruns on the augmented set; member 0 shares the teacher's seed
    t0 = time.perf_counter()
    members_dir = out / "members"
    members_dir.mkdir(exist_ok=True)
    member_valid: list[list[PredictionRecord]] = []
    member_test: list[list[PredictionRecord]] = []
    member_reports: list[MetricReport] = []
    for i in range(cfg.ensemble.members):
        model, _ = load_checkpoint(pre_ckpt, vocab_sha256=vocab.sha256())
        stem = members_dir / f"member{i}"
        run_finetune(cfg.finetune_plan(seed + i, augmented=True), model, augmented, valid, vocab,
                     stem.with_suffix(".log.csv"))
        save_checkpoint(model, stem.with_suffix(".ckpt"), vocab.sha256())
        preds = _predict_split(model, valid, vocab, stem.with_name(f"member{i}_valid.jsonl"))
        member_valid.append(preds)
        member_reports.append(evaluate(preds, valid, base))
        st.record(stem.with_suffix(".ckpt"), stem.with_suffix(".log.csv"), stem.with_name(f"member{i}_valid.jsonl"))
        if test:
            member_test.append(_predict_split(model, test, vocab, stem.with_name(f"member{i}_test.jsonl")))
            st.record(stem.with_name(f"member{i}_test.jsonl"))
    st.timed("members", t0)

    t0 = time.perf_counter()
    chosen = select_top_k(list(zip(range(len(member_reports)), member_reports)), cfg.ensemble.metric, cfg.ensemble.top)
    ens_valid = ensemble_average([member_valid[i] for i in chosen])
    write_predictions(out / "ensemble_valid.jsonl", ens_valid)
    st.record(out / "ensemble_valid.jsonl")
    if test:
        ens_test = ensemble_average([member_test[i] for i in chosen])
        write_predictions(out / "ensemble_test.jsonl", ens_test)
        st.record(out / "ensemble_test.jsonl")

    valid_reports = {
        "teacher": evaluate(teacher_valid, valid, base).to_json(),
        "members": [r.to_json() for r in member_reports],
        "ensemble": evaluate(ens_valid, valid, base).to_json(),
    }
    reports: dict = {"valid": valid_reports}
    if test:
        reports["test"] = {
            "teacher": evaluate(teacher_test, test, base).to_json(),
            "members": [evaluate(m, test, base).to_json() for m in member_test],
            "ensemble": evaluate(ens_test, test, base).to_json(),
        }
    losses = pre.epoch_losses
    best_member = max(r.accuracy for r in member_reports)
    reports["summary"] = {
        "pretrain_first_epoch_loss": losses[0],
        "pretrain_final_epoch_loss": losses[-1],
        "pretrain_loss_ratio": losses[-1] / losses[0],
        "teacher_best_step": teacher_res.best_step,
        "teacher_valid_accuracy": valid_reports["teacher"]["accuracy"],
        "ssmba_paired_member_valid_accuracy": member_reports[0].accuracy,
        "ssmba_accuracy_delta": member_reports[0].accuracy - valid_reports["teacher"]["accuracy"],
        "best_member_valid_accuracy": best_member,
        "ensemble_members": list(chosen),
        "ensemble_valid_accuracy": valid_reports["ensemble"]["accuracy"],
        "ensemble_minus_best_member": valid_reports["ensemble"]["accuracy"] - best_member,
    }
    dump_json(out / "reports.json", reports)
    (out / "report.txt").write_text(render_reports(reports), encoding="utf-8")
    st.record(out / "reports.json", out / "report.txt")
    st.timed("ensemble+eval", t0)

    inputs = {}
    for name in ("train", "valid", "test", "reddit", "pairs", "vocab", "init"):
        value = getattr(cfg.paths, name)
        if value:
            inputs[name] = {"path": value, "sha256": sha256_path(value)}
    manifest = {
        "tool": "breakdown-lab",
        "version": __version__,
        "config_hash": cfg.hash(),
        "config": {k: v for k, v in cfg.to_json().items() if k != "paths"},
        "inputs": inputs,
        "seeds": {
            "global": seed,
            "pretrain": seed,
            "teacher": seed,
            "augment": seed,
            "members": [seed + i for i in range(cfg.ensemble.members)],
        },
        "counts": {
            "train": len(train),
            "valid": len(valid),
            "test": len(test),
            "reddit_pairs": len(pairs),
            "reddit_skipped_lines": stats.skipped if stats else 0,
            "augmented_rows": len(originals) + len(augments),
            "vocab_size": len(vocab),
        },
        "outputs": dict(sorted(st.outputs.items())),
    }
    dump_json(out / "manifest.json", manifest)
    dump_json(out / "timings.json", st.timings)
    return PipelineResult(out, manifest, reports, st.timings)


def render_reports(reports: dict) -> str:
    lines = []
    for split in ("valid", "test"):
        if split not in reports:
            continue
        lines.append(f"[{split}]")
        lines.append(f"{'system':<12} {'acc':>7} {'f1_macro':>9} {'f1_B':>7} {'js_div':>7}")
        rows = [("teacher", reports[split]["teacher"])]
        rows += [(f"member{i}", r) for i, r in enumerate(reports[split]["members"])]
        rows.append(("ensemble", reports[split]["ensemble"]))
        for name, r in rows:
            lines.append(
                f"{name:<12} {r['accuracy']:>7.4f} {r['f1_macro']:>9.4f} {r['f1_breakdown']:>7.4f} {r['js_div']:>7.4f}"
            )
        lines.append("")
    s = reports["summary"]
    lines.append(f"pretrain loss {s['pretrain_first_epoch_loss']:.4f} -> {s['pretrain_final_epoch_loss']:.4f}"
                 f" (ratio {s['pretrain_loss_ratio']:.3f})")
    lines.append(f"ssmba delta (member0 - teacher) {s['ssmba_accuracy_delta']:+.4f}")
    lines.append(f"ensemble {s['ensemble_members']} minus best member {s['ensemble_minus_best_member']:+.4f}")
    return "\n".join(lines) + "\n"
