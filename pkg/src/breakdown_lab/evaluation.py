"""Breakdown-detection metrics, prediction files, and top-k probability ensembles."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import LABELS, Example, read_jsonl, tie_broken_argmax


class EvalError(ValueError):
    pass


HIGHER_IS_BETTER = {"accuracy": True, "f1_macro": True, "f1_breakdown": True, "js_div": False}


def _check_lengths(preds: Sequence, golds: Sequence) -> None:
    if len(preds) != len(golds):
        raise EvalError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise EvalError("no predictions")


def accuracy(preds: Sequence[str], golds: Sequence[str]) -> float:
    _check_lengths(preds, golds)
    return sum(p == g for p, g in zip(preds, golds)) / len(golds)


def per_class_f1(preds: Sequence[str], golds: Sequence[str]) -> dict[str, float]:
    _check_lengths(preds, golds)
    scores = {}
    for label in LABELS:
        tp = sum(p == label and g == label for p, g in zip(preds, golds))
        n_pred = sum(p == label for p in preds)
        n_gold = sum(g == label for g in golds)
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_gold if n_gold else 0.0
        denom = precision + recall
        scores[label] = 2 * precision * recall / denom if denom else 0.0
    return scores


def f1(preds: Sequence[str], golds: Sequence[str], mode: str = "macro") -> float:
    """Macro F1 over (B, SB, NB), or ``mode="B"`` for breakdown-only F1."""
    scores = per_class_f1(preds, golds)
    if mode == "macro":
        return sum(scores.values()) / len(scores)
    if mode in scores:
        return scores[mode]
    raise EvalError(f"unknown F1 mode {mode!r}")


def _log(x: float, base: float) -> float:
    return math.log(x) / math.log(base)


def _check_dist(p: Sequence[float], name: str) -> None:
    if len(p) != 3 or any(x < 0 for x in p) or abs(sum(p) - 1.0) > 1e-6:
        raise EvalError(f"{name} is not a distribution over 3 labels: {list(p)}")


def js_divergence(p: Sequence[float], q: Sequence[float], base: float = 2.0) -> float:
    """Jensen-Shannon divergence; ``base`` 2 bounds it by 1, base e by ln 2."""
    _check_dist(p, "p")
    _check_dist(q, "q")
    total = 0.0
    for pi, qi in zip(p, q):
        mi = (pi + qi) / 2
        if pi > 0:
            total += 0.5 * pi * _log(pi / mi, base)
        if qi > 0:
            total += 0.5 * qi * _log(qi / mi, base)
    return max(total, 0.0)


def parse_base(base: str | float) -> float:
    if isinstance(base, (int, float)):
        return float(base)
    if base in ("2", "2.0"):
        return 2.0
    if base in ("e", "E"):
        return math.e
    raise EvalError(f"unsupported log base {base!r} (use 2 or e)")


def base_name(base: float) -> str:
    return "e" if base == math.e else f"{base:g}"


@dataclass(frozen=True)
class PredictionRecord:
    origin: str
    probs: tuple[float, float, float]
    predicted: str

    @classmethod
    def from_probs(cls, origin: str, probs: Sequence[float]) -> "PredictionRecord":
        probs = tuple(float(x) for x in probs)
        return cls(origin, probs, LABELS[tie_broken_argmax(probs)])  # type: ignore[arg-type]

    def to_json(self) -> dict:
        return {"origin": self.origin, "probs": list(self.probs), "label": self.predicted}


def write_predictions(path: str | Path, records: Iterable[PredictionRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(r.to_json()) + "\n")


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    path = Path(path)
    if not path.is_file():
        raise EvalError(f"{path}: no such prediction file")
    records = []
    for obj in read_jsonl(path):
        try:
            records.append(PredictionRecord(str(obj["origin"]), tuple(obj["probs"]), str(obj["label"])))
        except KeyError as exc:
            raise EvalError(f"{path}: prediction record missing {exc}") from None
    return records


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    f1_macro: float
    f1_breakdown: float
    js_div: float
    js_base: str
    n_examples: int

    def to_json(self) -> dict:
        return asdict(self)

    def metric(self, name: str) -> float:
        return getattr(self, name)

    def table(self) -> str:
        rows = [
            ("accuracy", f"{self.accuracy:.4f}"),
            ("f1_macro", f"{self.f1_macro:.4f}"),
            ("f1_breakdown", f"{self.f1_breakdown:.4f}"),
            (f"js_div (base {self.js_base})", f"{self.js_div:.4f}"),
            ("n_examples", str(self.n_examples)),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def evaluate(predictions: Sequence[PredictionRecord], golds: Sequence[Example], base: float = 2.0) -> MetricReport:
    """Score predictions against gold examples matched by origin."""
    by_origin = {r.origin: r for r in predictions}
    gold_origins = [g.origin for g in golds]
    missing = [o for o in gold_origins if o not in by_origin]
    extra = sorted(set(by_origin) - set(gold_origins))
    if missing or extra or len(by_origin) != len(predictions):
        parts = []
        if missing:
            parts.append(f"missing origins: {', '.join(missing[:20])}")
        if extra:
            parts.append(f"extra origins: {', '.join(extra[:20])}")
        if len(by_origin) != len(predictions):
            parts.append("duplicate origins in predictions")
        raise EvalError("; ".join(parts))
    if not golds:
        raise EvalError("no gold examples")
    ordered = [by_origin[o] for o in gold_origins]
    preds = [r.predicted for r in ordered]
    gold_labels = [g.majority for g in golds]
    jsd = sum(js_divergence(r.probs, g.target.p, base) for r, g in zip(ordered, golds)) / len(golds)
    return MetricReport(
        accuracy=accuracy(preds, gold_labels),
        f1_macro=f1(preds, gold_labels, "macro"),
        f1_breakdown=f1(preds, gold_labels, "B"),
        js_div=jsd,
        js_base=base_name(base),
        n_examples=len(golds),
    )


def ensemble_average(members: Sequence[Sequence[PredictionRecord]]) -> list[PredictionRecord]:
    """Elementwise mean of member distributions; members must list the same origins in order."""
    if not members:
        raise EvalError("ensemble needs at least one member")
    n = len(members[0])
    for k, m in enumerate(members):
        if len(m) != n or any(a.origin != b.origin for a, b in zip(m, members[0])):
            raise EvalError(f"ensemble member {k} is misaligned with member 0")
    stacked = np.array([[r.probs for r in m] for m in members], dtype=np.float64)
    mean = stacked.mean(axis=0)
    mean /= mean.sum(axis=1, keepdims=True)
    return [PredictionRecord.from_probs(r.origin, p) for r, p in zip(members[0], mean)]


def select_top_k(candidates: Sequence[tuple[object, MetricReport]], metric: str, k: int) -> list[object]:
    """The k best candidates by ``metric``; ties keep candidate order."""
    if metric not in HIGHER_IS_BETTER:
        raise EvalError(f"unknown ranking metric {metric!r}")
    if not 1 <= k <= len(candidates):
        raise EvalError(f"k={k} must be between 1 and {len(candidates)}")
    sign = -1.0 if HIGHER_IS_BETTER[metric] else 1.0
    order = sorted(range(len(candidates)), key=lambda i: (sign * candidates[i][1].metric(metric), i))
    return [candidates[i][0] for i in order[:k]]


def is_better(metric: str, new: float, best: float | None) -> bool:
    if best is None:
        return True
    return new > best if HIGHER_IS_BETTER[metric] else new < best
