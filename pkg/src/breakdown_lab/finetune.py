"""Soft-label fine-tuning on annotator distributions, best-checkpoint selection, prediction."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Example
from .evaluation import HIGHER_IS_BETTER, MetricReport, PredictionRecord, evaluate, is_better
from .model import BreakdownModel, ModelError, collate, kl_loss, probs_from_logits, reinit_classifier
from .optim import Trainer
from .tokenizer import EncodedPair, Vocab, encode_pair

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetunePlan:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 3e-5
    warmup_frac: float = 0.1
    eval_every: int = 0  # 0: once per epoch
    selection_metric: str = "accuracy"
    seed: int = 0
    reinit_head: bool = True

    def errors(self, prefix: str = "") -> list[str]:
        errs = []
        if self.epochs < 1:
            errs.append(f"{prefix}epochs: must be >= 1")
        if self.batch_size < 1:
            errs.append(f"{prefix}batch_size: must be positive")
        if self.learning_rate < 0:
            errs.append(f"{prefix}learning_rate: must be non-negative")
        if not 0.0 <= self.warmup_frac < 1.0:
            errs.append(f"{prefix}warmup_frac: must be in [0, 1)")
        if self.eval_every < 0:
            errs.append(f"{prefix}eval_every: must be non-negative")
        if self.selection_metric not in ("accuracy", "f1_macro", "js_div"):
            errs.append(f"{prefix}selection_metric: must be accuracy, f1_macro or js_div")
        return errs


@dataclass
class FinetuneResult:
    model: BreakdownModel
    best_step: int
    best_report: MetricReport
    log_rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)


def encode_examples(examples: Sequence[Example], vocab: Vocab, max_len: int) -> list[EncodedPair]:
    return [encode_pair(vocab, ex.context, ex.utterance, max_len, pad=False) for ex in examples]


def predict_encoded(model: BreakdownModel, origins: Sequence[str], encoded: Sequence[EncodedPair],
                    batch_size: int = 64) -> list[PredictionRecord]:
    model.eval()
    records = []
    with torch.no_grad():
        for start in range(0, len(encoded), batch_size):
            logits = model.classify_logits(collate(encoded[start : start + batch_size]))
            for origin, p in zip(origins[start : start + batch_size], probs_from_logits(logits)):
                records.append(PredictionRecord.from_probs(origin, p))
    return records


def predict(model: BreakdownModel, examples: Sequence[Example], vocab: Vocab, batch_size: int = 64) -> list[PredictionRecord]:
    """One record per example, in input order; evaluation mode, so deterministic."""
    check_vocab(model, vocab)
    encoded = encode_examples(examples, vocab, model.cfg.max_len)
    return predict_encoded(model, [ex.origin for ex in examples], encoded, batch_size)


def check_vocab(model: BreakdownModel, vocab: Vocab) -> None:
    if model.cfg.vocab_size != len(vocab):
        raise ModelError(f"checkpoint vocab_size {model.cfg.vocab_size} does not match vocabulary size {len(vocab)}")


def run_finetune(
    plan: FinetunePlan,
    model: BreakdownModel,
    train: Sequence[Example],
    valid: Sequence[Example],
    vocab: Vocab,
    log_path: str | Path | None = None,
) -> FinetuneResult:
    """Adam on the KL objective; keeps the parameters with the best validation metric.

    ``model`` is trained in place and then overwritten with the best snapshot. Original
    and augmented examples go through the same loss with their own targets.
    """
    if not train or not valid:
        raise ValueError("train and valid splits must be non-empty")
    errs = plan.errors()
    if errs:
        raise ValueError("; ".join(errs))
    check_vocab(model, vocab)
    if plan.reinit_head:
        reinit_classifier(model, plan.seed)

    max_len = model.cfg.max_len
    train_enc = encode_examples(train, vocab, max_len)
    targets = torch.tensor([ex.target.p for ex in train], dtype=torch.float64)
    valid_enc = encode_examples(valid, vocab, max_len)
    valid_origins = [ex.origin for ex in valid]

    rng = np.random.default_rng(plan.seed)
    torch.manual_seed(plan.seed)
    steps_per_epoch = -(-len(train) // plan.batch_size)
    total = steps_per_epoch * plan.epochs
    eval_every = plan.eval_every or steps_per_epoch
    trainer = Trainer(model, plan.learning_rate, int(plan.warmup_frac * total), total, decay=True)

    best_state = None
    best_value: float | None = None
    best_step = 0
    best_report = None
    log_rows = []
    loss_sum, loss_n = 0.0, 0

    def evaluate_now() -> None:
        nonlocal best_state, best_value, best_step, best_report, loss_sum, loss_n
        report = evaluate(predict_encoded(model, valid_origins, valid_enc), valid)
        value = report.metric(plan.selection_metric)
        train_kl = loss_sum / loss_n if loss_n else float("nan")
        log_rows.append((trainer.step_count, train_kl, report.accuracy, report.f1_macro, report.js_div))
        logger.info("step %d train_kl %.4f valid_acc %.4f", trainer.step_count, train_kl, report.accuracy)
        if is_better(plan.selection_metric, value, best_value):
            best_value, best_step, best_report = value, trainer.step_count, report
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        loss_sum, loss_n = 0.0, 0

    for _ in range(plan.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), plan.batch_size):
            idx = order[start : start + plan.batch_size]
            model.train()
            logits = model.classify_logits(collate([train_enc[i] for i in idx]))
            loss = kl_loss(logits, targets[idx].to(logits.dtype))
            trainer.step(loss)
            loss_sum += loss.item() * len(idx)
            loss_n += len(idx)
            if trainer.step_count % eval_every == 0:
                evaluate_now()
    if trainer.step_count % eval_every:
        evaluate_now()

    model.load_state_dict(best_state)
    model.eval()
    if log_path is not None:
        write_train_log(log_path, log_rows)
    return FinetuneResult(model, best_step, best_report, log_rows)


def select_best(steps: Sequence[int], values: Sequence[float], metric: str) -> int:
    """Step with the best metric value; the earliest step wins ties."""
    best = None
    best_step = steps[0]
    for step, value in zip(steps, values):
        if is_better(metric, value, best):
            best, best_step = value, step
    return best_step


def write_train_log(path: str | Path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "train_kl", "valid_acc", "valid_f1", "valid_jsd"])
        for step, kl, acc, f1m, jsd in rows:
            w.writerow([step, repr(kl), repr(acc), repr(f1m), repr(jsd)])

