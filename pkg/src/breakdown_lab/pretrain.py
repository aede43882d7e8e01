"""MLM corruption and continued pre-training over parent/child comment pairs."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import RedditPair
from .model import (
    BreakdownModel,
    ModelConfig,
    ModelError,
    collate,
    init_params,
    load_checkpoint,
    mlm_loss,
)
from .optim import Trainer
from .tokenizer import MASK_ID, NUM_SPECIAL, EncodedPair, Vocab, encode_pair

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskPolicy:
    select_prob: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1

    def errors(self, prefix: str = "") -> list[str]:
        errs = []
        if not 0.0 <= self.select_prob <= 1.0:
            errs.append(f"{prefix}select_prob: must be in [0, 1], got {self.select_prob}")
        fracs = (self.mask_frac, self.random_frac, self.keep_frac)
        if any(f < 0 for f in fracs):
            errs.append(f"{prefix}mask_frac/random_frac/keep_frac: must be non-negative")
        if abs(sum(fracs) - 1.0) > 1e-9:
            errs.append(
                f"{prefix}mask_frac + random_frac + keep_frac: must sum to 1, got {sum(fracs):.6g}"
            )
        return errs

    def validate(self) -> "MaskPolicy":
        errs = self.errors()
        if errs:
            raise ValueError("; ".join(errs))
        return self


@dataclass(frozen=True)
class MaskResult:
    corrupted: EncodedPair
    positions: tuple[int, ...]
    original_ids: tuple[int, ...]


def eligible_positions(pair: EncodedPair) -> np.ndarray:
    ids = np.asarray(pair.token_ids[: pair.length])
    return np.flatnonzero(ids >= NUM_SPECIAL)


def apply_mask(
    policy: MaskPolicy,
    pair: EncodedPair,
    rng: np.random.Generator,
    vocab_size: int,
    selected: np.ndarray | None = None,
) -> MaskResult:
    """BERT-style corruption of one pair.

    Every eligible (non-special, non-pad) position is selected independently with
    ``select_prob``; a selected position becomes MASK, a uniform random non-special id,
    or stays as is, with probabilities ``mask_frac``/``random_frac``/``keep_frac``.
    ``selected`` overrides the selection draw.
    """
    eligible = eligible_positions(pair)
    if selected is None:
        selected = eligible[rng.random(eligible.size) < policy.select_prob]
    ids = np.asarray(pair.token_ids).copy()
    original = ids[selected].copy()
    if selected.size:
        action = rng.random(selected.size)
        to_mask = selected[action < policy.mask_frac]
        to_random = selected[(action >= policy.mask_frac) & (action < policy.mask_frac + policy.random_frac)]
        ids[to_mask] = MASK_ID
        if to_random.size:
            ids[to_random] = rng.integers(NUM_SPECIAL, vocab_size, size=to_random.size)
    return MaskResult(
        pair.replace_ids(ids.tolist()),
        tuple(int(i) for i in selected),
        tuple(int(i) for i in original),
    )


@dataclass(frozen=True)
class PretrainPlan:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-4
    warmup_steps: int = 0
    max_steps: int | None = None
    init: str = "scratch"  # or "warm:PATH"
    seed: int = 0
    shuffle_window: int = 100_000

    def errors(self, prefix: str = "") -> list[str]:
        errs = []
        if self.epochs < 1:
            errs.append(f"{prefix}epochs: must be >= 1")
        if self.batch_size < 1:
            errs.append(f"{prefix}batch_size: must be positive")
        if self.learning_rate < 0:
            errs.append(f"{prefix}learning_rate: must be non-negative")
        if self.warmup_steps < 0:
            errs.append(f"{prefix}warmup_steps: must be non-negative")
        if self.max_steps is not None and self.max_steps < 1:
            errs.append(f"{prefix}max_steps: must be positive")
        if self.init != "scratch" and not self.init.startswith("warm:"):
            errs.append(f"{prefix}init: must be 'scratch' or 'warm:PATH', got {self.init!r}")
        return errs


@dataclass
class PretrainResult:
    model: BreakdownModel
    epoch_losses: list[float] = field(default_factory=list)
    log_rows: list[tuple[int, int, float]] = field(default_factory=list)


def windowed_permutation(n: int, window: int, rng: np.random.Generator) -> np.ndarray:
    """Shuffle within consecutive windows, then shuffle window order (bounded buffering)."""
    starts = np.arange(0, n, window)
    order = rng.permutation(len(starts))
    return np.concatenate([start + rng.permutation(min(window, n - start)) for start in starts[order]])


def initial_model(plan_init: str, cfg: ModelConfig, vocab_sha256: str | None = None) -> BreakdownModel:
    if plan_init == "scratch":
        return init_params(cfg)
    path = plan_init[len("warm:"):]
    model, _ = load_checkpoint(path, expect=cfg, vocab_sha256=vocab_sha256)
    return model


def encode_pairs(pairs: Sequence[RedditPair], vocab: Vocab, max_len: int) -> list[EncodedPair]:
    # parent in segment 0, child in segment 1, same layout as context/utterance
    return [encode_pair(vocab, p.parent_text, p.child_text, max_len, pad=False) for p in pairs]


def run_pretrain(
    plan: PretrainPlan,
    cfg: ModelConfig,
    pairs: Sequence[RedditPair],
    vocab: Vocab,
    policy: MaskPolicy = MaskPolicy(),
    log_path: str | Path | None = None,
) -> PretrainResult:
    if not pairs:
        raise ValueError("empty pair stream")
    if cfg.vocab_size != len(vocab):
        raise ModelError(f"config vocab_size {cfg.vocab_size} does not match vocabulary size {len(vocab)}")
    errs = plan.errors() + policy.errors()
    if errs:
        raise ValueError("; ".join(errs))
    model = initial_model(plan.init, cfg, vocab.sha256())

    encoded = encode_pairs(pairs, vocab, cfg.max_len)
    rng = np.random.default_rng(plan.seed)
    torch.manual_seed(plan.seed)
    steps_per_epoch = -(-len(encoded) // plan.batch_size)
    total = steps_per_epoch * plan.epochs
    if plan.max_steps is not None:
        total = min(total, plan.max_steps)
    trainer = Trainer(model, plan.learning_rate, plan.warmup_steps)
    result = PretrainResult(model)
    model.train()
    for epoch in range(1, plan.epochs + 1):
        order = windowed_permutation(len(encoded), plan.shuffle_window, rng)
        loss_sum, count = 0.0, 0
        for start in range(0, len(order), plan.batch_size):
            if trainer.step_count >= total:
                break
            chunk = [apply_mask(policy, encoded[i], rng, cfg.vocab_size) for i in order[start : start + plan.batch_size]]
            rows = [r for r, m in enumerate(chunk) for _ in m.positions]
            if not rows:
                continue
            cols = [c for m in chunk for c in m.positions]
            true_ids = torch.tensor([t for m in chunk for t in m.original_ids])
            batch = collate([m.corrupted for m in chunk])
            loss = mlm_loss(model.mlm_logits(batch, rows, cols), true_ids)
            trainer.step(loss)
            loss_sum += loss.item() * len(rows)
            count += len(rows)
        if count == 0:
            break
        mean = loss_sum / count
        result.epoch_losses.append(mean)
        result.log_rows.append((epoch, trainer.step_count, mean))
        logger.info("pretrain epoch %d step %d mlm_loss %.4f", epoch, trainer.step_count, mean)
    model.eval()
    if log_path is not None:
        write_loss_log(log_path, result.log_rows)
    return result


def write_loss_log(path: str | Path, rows: Sequence[tuple[int, int, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "step", "mlm_loss"])
        for epoch, step, loss in rows:
            w.writerow([epoch, step, repr(loss)])
