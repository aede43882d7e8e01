"""Self-supervised manifold-based augmentation for sentence pairs.

An augment is produced by masking the original pair (mask-only corruption), filling the
masks with a pre-trained MLM, and labelling the result with a teacher classifier trained
on the original data. Annotator targets are never copied onto augments.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Example, LabelDistribution, example_to_json, tie_broken_argmax, write_jsonl
from .finetune import check_vocab, encode_examples, predict_encoded
from .model import BreakdownModel, ModelError, collate
from .pretrain import MaskPolicy, MaskResult, apply_mask, eligible_positions
from .tokenizer import NUM_SPECIAL, EncodedPair, Vocab, decode

MAX_RESAMPLES = 64


@dataclass(frozen=True)
class Strategy:
    kind: str = "sample"  # greedy | sample | top_k
    temperature: float = 1.0
    k: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("greedy", "sample", "top_k"):
            raise ValueError(f"unknown reconstruction strategy {self.kind!r}")
        if self.kind != "greedy" and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kind == "top_k" and self.k < 1:
            raise ValueError("top_k needs k >= 1")

    @classmethod
    def parse(cls, text: str, temperature: float = 1.0) -> "Strategy":
        if text == "greedy":
            return cls("greedy")
        if text == "sample":
            return cls("sample", temperature)
        if text.startswith("topk:"):
            return cls("top_k", temperature, int(text[len("topk:"):]))
        raise ValueError(f"unknown strategy {text!r} (use sample, greedy or topk:K)")

    def __str__(self) -> str:
        if self.kind == "top_k":
            return f"topk:{self.k}"
        return self.kind


@dataclass(frozen=True)
class AugmentConfig:
    select_prob: float = 0.45
    num_augments: int = 2
    strategy: Strategy = Strategy()
    label_mode: str = "soft"
    seed: int = 0

    def errors(self, prefix: str = "") -> list[str]:
        errs = []
        if not 0.0 < self.select_prob <= 1.0:
            errs.append(f"{prefix}select_prob: must be in (0, 1], got {self.select_prob}")
        if self.num_augments < 1:
            errs.append(f"{prefix}num_augments: must be >= 1")
        if self.label_mode not in ("soft", "hard"):
            errs.append(f"{prefix}label_mode: must be soft or hard")
        return errs

    @property
    def policy(self) -> MaskPolicy:
        return MaskPolicy(self.select_prob, 1.0, 0.0, 0.0)


@dataclass(frozen=True)
class AugmentedExample:
    context: str
    utterance: str
    pseudo_target: LabelDistribution
    source_origin: str
    aug_index: int
    corruption_seed: int

    @property
    def origin(self) -> str:
        return f"{self.source_origin}#aug{self.aug_index}"

    def as_example(self) -> Example:
        return Example(self.context, self.utterance, self.pseudo_target, self.origin)

    def to_json(self) -> dict:
        return {
            "context": self.context,
            "utterance": self.utterance,
            "counts": None,
            "origin": self.origin,
            "pseudo": list(self.pseudo_target.p),
            "source_origin": self.source_origin,
            "aug_index": self.aug_index,
            "corruption_seed": self.corruption_seed,
        }


def corruption_seed(seed: int, origin: str, aug_index: int) -> int:
    """Per-augment seed from (global seed, origin, index); independent of processing order."""
    ss = np.random.SeedSequence([seed, zlib.crc32(origin.encode("utf-8")), aug_index])
    return int(ss.generate_state(1)[0])


def corrupt_q(select_prob: float, pair: EncodedPair, rng: np.random.Generator) -> MaskResult:
    """Mask-only corruption with at least one masked position when any is eligible.

    An empty selection is redrawn; after ``MAX_RESAMPLES`` empty draws a single eligible
    position is chosen uniformly, so tiny ``select_prob`` values still terminate.
    """
    eligible = eligible_positions(pair)
    policy = MaskPolicy(select_prob, 1.0, 0.0, 0.0)
    if eligible.size == 0:
        return apply_mask(policy, pair, rng, NUM_SPECIAL + 1, selected=eligible)
    for _ in range(MAX_RESAMPLES):
        selected = eligible[rng.random(eligible.size) < select_prob]
        if selected.size:
            break
    else:
        selected = eligible[[int(rng.integers(eligible.size))]]
    return apply_mask(policy, pair, rng, NUM_SPECIAL + 1, selected=selected)


def choose_token(logits: np.ndarray, strategy: Strategy, rng: np.random.Generator) -> int:
    """Pick a replacement id from one row of vocabulary logits; special ids are excluded."""
    logits = np.asarray(logits, dtype=np.float64).copy()
    logits[:NUM_SPECIAL] = -np.inf
    if strategy.kind == "greedy":
        return int(np.argmax(logits))
    if strategy.kind == "top_k":
        k = min(strategy.k, logits.size - NUM_SPECIAL)
        candidates = np.argsort(-logits, kind="stable")[:k]
    else:
        candidates = np.arange(NUM_SPECIAL, logits.size)
    z = logits[candidates] / strategy.temperature
    z = np.exp(z - z.max())
    cdf = np.cumsum(z / z.sum())
    u = rng.random()
    pick = min(int(np.searchsorted(cdf, u, side="right")), len(candidates) - 1)
    return int(candidates[pick])


def reconstruct_batch(
    model: BreakdownModel,
    masked: Sequence[MaskResult],
    originals: Sequence[EncodedPair],
    strategy: Strategy,
    rngs: Sequence[np.random.Generator],
) -> list[EncodedPair]:
    """Fill every masked position; unmasked positions are copied from the original pair."""
    if not masked:
        return []
    rows = [r for r, m in enumerate(masked) for _ in m.positions]
    cols = [c for m in masked for c in m.positions]
    if not rows:
        return list(originals)
    model.eval()
    with torch.no_grad():
        logits = model.mlm_logits(collate([m.corrupted for m in masked]), rows, cols)
    logits = logits.to(torch.float64).numpy()
    out = []
    cursor = 0
    for m, orig, rng in zip(masked, originals, rngs):
        ids = list(orig.token_ids)
        for pos in m.positions:
            ids[pos] = choose_token(logits[cursor], strategy, rng)
            cursor += 1
        out.append(orig.replace_ids(ids))
    return out


def reconstruct_r(
    model: BreakdownModel,
    masked: MaskResult,
    original: EncodedPair,
    strategy: Strategy,
    rng: np.random.Generator,
    vocab_size: int | None = None,
) -> EncodedPair:
    if vocab_size is not None and model.cfg.vocab_size != vocab_size:
        raise ModelError(f"reconstruction model vocab_size {model.cfg.vocab_size} != {vocab_size}")
    if not masked.positions:
        raise ValueError("no masked positions to reconstruct")
    return reconstruct_batch(model, [masked], [original], strategy, [rng])[0]


def pseudo_label(
    teacher: BreakdownModel, examples: Sequence[Example], vocab: Vocab, mode: str = "soft"
) -> list[LabelDistribution]:
    """Teacher distributions (soft) or one-hot tie-broken argmaxes (hard)."""
    encoded = encode_examples(examples, vocab, teacher.cfg.max_len)
    records = predict_encoded(teacher, [ex.origin for ex in examples], encoded)
    out = []
    for r in records:
        if mode == "hard":
            hot = [0.0, 0.0, 0.0]
            hot[tie_broken_argmax(r.probs)] = 1.0
            out.append(LabelDistribution(tuple(hot)))  # type: ignore[arg-type]
        else:
            out.append(LabelDistribution.from_probs(r.probs))
    return out


def augment_examples(
    train: Sequence[Example],
    teacher: BreakdownModel,
    recon: BreakdownModel,
    vocab: Vocab,
    cfg: AugmentConfig,
    batch_size: int = 64,
) -> list[AugmentedExample]:
    if not train:
        raise ValueError("empty training set")
    errs = cfg.errors()
    if errs:
        raise ValueError("; ".join(errs))
    check_vocab(teacher, vocab)
    check_vocab(recon, vocab)
    encoded = encode_examples(train, vocab, recon.cfg.max_len)
    jobs = [(i, a) for i in range(len(train)) for a in range(cfg.num_augments)]
    texts: list[tuple[str, str, int]] = []
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start : start + batch_size]
        seeds = [corruption_seed(cfg.seed, train[i].origin, a) for i, a in chunk]
        rngs = [np.random.default_rng(s) for s in seeds]
        masked = [corrupt_q(cfg.select_prob, encoded[i], rng) for (i, _), rng in zip(chunk, rngs)]
        rebuilt = reconstruct_batch(recon, masked, [encoded[i] for i, _ in chunk], cfg.strategy, rngs)
        for pair, s in zip(rebuilt, seeds):
            ctx, utt = pair.segments()
            texts.append((decode(vocab, ctx), decode(vocab, utt), s))
    drafts = [
        Example(ctx, utt, train[i].target, f"{train[i].origin}#aug{a}")
        for (i, a), (ctx, utt, _) in zip(jobs, texts)
    ]
    labels = pseudo_label(teacher, drafts, vocab, cfg.label_mode)
    return [
        AugmentedExample(ctx, utt, label, train[i].origin, a, s)
        for (i, a), (ctx, utt, s), label in zip(jobs, texts, labels)
    ]


def augment_dataset(
    train: Sequence[Example],
    teacher: BreakdownModel,
    recon: BreakdownModel,
    vocab: Vocab,
    cfg: AugmentConfig,
) -> tuple[list[Example], list[AugmentedExample]]:
    """Originals (unchanged) followed by ``num_augments`` pseudo-labelled augments each."""
    augments = augment_examples(train, teacher, recon, vocab, cfg)
    return list(train), augments


def write_augmented(path: str | Path, originals: Sequence[Example], augments: Sequence[AugmentedExample]) -> None:
    write_jsonl(path, [example_to_json(ex) for ex in originals] + [a.to_json() for a in augments])
