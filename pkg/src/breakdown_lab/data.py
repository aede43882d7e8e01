"""DBDC dialogue ingestion, annotator vote aggregation and Reddit parent/child pairs."""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

LABELS = ("B", "SB", "NB")
LABEL_INDEX = {label: i for i, label in enumerate(LABELS)}
VOTE_SYMBOLS = {"X": "B", "T": "SB", "O": "NB"}
DELETED_BODIES = frozenset({"[deleted]", "[removed]"})


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LabelDistribution:
    """Probability vector over (B, SB, NB); ``counts`` is None for pseudo-labels."""

    p: tuple[float, float, float]
    counts: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        if len(self.p) != 3 or any(x < 0 for x in self.p) or abs(sum(self.p) - 1.0) > 1e-9:
            raise DataError(f"invalid label distribution {self.p}")

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "LabelDistribution":
        counts = tuple(int(c) for c in counts)
        if len(counts) != 3 or any(c < 0 for c in counts):
            raise DataError(f"invalid vote counts {counts}")
        total = sum(counts)
        if total == 0:
            raise DataError("no annotations")
        return cls(tuple(c / total for c in counts), counts)  # type: ignore[arg-type]

    @classmethod
    def from_probs(cls, probs: Sequence[float]) -> "LabelDistribution":
        probs = [float(x) for x in probs]
        total = sum(probs)
        return cls(tuple(x / total for x in probs))  # type: ignore[arg-type]


def tie_broken_argmax(values: Sequence[float]) -> int:
    """Index of the largest value; ties go to the most severe label (B > SB > NB)."""
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return best


def aggregate_votes(votes: Iterable[str]) -> LabelDistribution:
    counts = [0, 0, 0]
    for v in votes:
        if v not in LABEL_INDEX:
            raise DataError(f"unknown label {v!r}")
        counts[LABEL_INDEX[v]] += 1
    if sum(counts) == 0:
        raise DataError("no annotations")
    return LabelDistribution.from_counts(counts)


def majority_label(dist: LabelDistribution) -> str:
    values = dist.counts if dist.counts is not None else dist.p
    return LABELS[tie_broken_argmax(values)]


@dataclass(frozen=True)
class Turn:
    speaker: str  # "user" or "system"
    utterance: str
    annotations: tuple[str, ...] = ()


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    turns: tuple[Turn, ...]


@dataclass(frozen=True)
class Example:
    context: str
    utterance: str
    target: LabelDistribution
    origin: str
    majority: str = field(default="")

    def __post_init__(self) -> None:
        if not self.majority:
            object.__setattr__(self, "majority", majority_label(self.target))


def parse_dbdc(obj: dict, source: str = "<dbdc>") -> Dialogue:
    try:
        dialogue_id = str(obj["dialogue-id"])
        raw_turns = obj["turns"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{source}: missing field {exc}") from None
    turns = []
    for pos, t in enumerate(raw_turns):
        turn_index = t.get("turn-index", pos)
        speaker = {"U": "user", "S": "system"}.get(t.get("speaker"))
        if speaker is None:
            raise DataError(f"{source}: unknown speaker {t.get('speaker')!r} at turn {turn_index}")
        votes = []
        for ann in t.get("annotations") or []:
            sym = ann.get("breakdown")
            if sym not in VOTE_SYMBOLS:
                raise DataError(f"unknown breakdown symbol {sym} at turn {turn_index}")
            votes.append(VOTE_SYMBOLS[sym])
        turns.append(Turn(speaker, str(t.get("utterance", "")), tuple(votes)))
    return Dialogue(dialogue_id, tuple(turns))


def parse_dbdc_file(path: str | Path) -> Dialogue:
    raw = Path(path).read_bytes()
    text = raw.decode("utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DataError(f"{path}: malformed JSON at byte {offset}: {exc.msg}") from None
    return parse_dbdc(obj, str(path))


def build_examples(dlg: Dialogue) -> list[Example]:
    """One example per annotated system turn, with the latest user turn as context."""
    examples = []
    last_user = ""
    for i, turn in enumerate(dlg.turns):
        if turn.speaker == "user":
            last_user = turn.utterance
        elif turn.annotations:
            examples.append(
                Example(
                    context=last_user,
                    utterance=turn.utterance,
                    target=aggregate_votes(turn.annotations),
                    origin=f"{dlg.dialogue_id}:{i}",
                )
            )
    return examples


def label_histogram(examples: Sequence[Example]) -> tuple[float, float, float]:
    if not examples:
        raise DataError("no examples")
    counts = [0, 0, 0]
    for ex in examples:
        counts[LABEL_INDEX[ex.majority]] += 1
    n = len(examples)
    return (counts[0] / n, counts[1] / n, counts[2] / n)


def load_dbdc_dir(path: str | Path) -> list[Example]:
    """Examples from every ``*.json`` dialogue file under ``path``, in sorted file order."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.rglob("*.json"))
    examples: list[Example] = []
    for f in files:
        examples.extend(build_examples(parse_dbdc_file(f)))
    return examples


# -- example files ---------------------------------------------------------


def example_to_json(ex: Example) -> dict:
    return {
        "context": ex.context,
        "utterance": ex.utterance,
        "counts": list(ex.target.counts) if ex.target.counts is not None else None,
        "origin": ex.origin,
    }


def example_from_json(obj: dict) -> Example:
    if obj.get("pseudo") is not None:
        target = LabelDistribution.from_probs(obj["pseudo"])
    else:
        target = LabelDistribution.from_counts(obj["counts"])
    return Example(str(obj["context"]), str(obj["utterance"]), target, str(obj["origin"]))


def dumps_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=False) + "\n"


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(dumps_line(row))


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from None


def load_examples(path: str | Path) -> list[Example]:
    """Examples from an example JSONL file, or from DBDC JSON files/directories."""
    path = Path(path)
    if path.is_dir() or path.suffix == ".json":
        return load_dbdc_dir(path)
    try:
        return [example_from_json(obj) for obj in read_jsonl(path)]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad example record ({exc})") from None


def save_examples(path: str | Path, examples: Iterable[Example]) -> None:
    write_jsonl(path, (example_to_json(ex) for ex in examples))


# -- reddit ----------------------------------------------------------------


@dataclass(frozen=True)
class RedditPair:
    parent_text: str
    child_text: str
    pair_id: str


@dataclass
class ExtractStats:
    lines: int = 0
    skipped: int = 0
    dropped: int = 0
    pairs: int = 0
    evicted: int = 0


def _usable(body: object) -> bool:
    return isinstance(body, str) and bool(body.strip()) and body.strip() not in DELETED_BODIES


def extract_reddit_pairs(
    lines: Iterable[str],
    limit: int | None = None,
    capacity: int = 1_000_000,
    stats: ExtractStats | None = None,
) -> Iterator[RedditPair]:
    """Stream (parent, child) comment pairs out of a pushshift-style dump.

    A child pairs only with a parent comment (``t1_`` prefix) seen earlier in the
    stream. Seen bodies live in a FIFO map of at most ``capacity`` entries. Malformed
    lines are skipped and counted in ``stats.skipped``.
    """
    stats = stats if stats is not None else ExtractStats()
    seen: OrderedDict[str, str] = OrderedDict()
    if limit is not None and limit <= 0:
        return
    for line in lines:
        if not line.strip():
            continue
        stats.lines += 1
        try:
            obj = json.loads(line)
            cid, parent_id, body = obj["id"], obj["parent_id"], obj["body"]
        except (json.JSONDecodeError, KeyError, TypeError):
            stats.skipped += 1
            continue
        if not _usable(body):
            stats.dropped += 1
            continue
        body = body.strip()
        if isinstance(parent_id, str) and parent_id.startswith("t1_"):
            parent_body = seen.get(parent_id[3:])
            if parent_body is not None:
                stats.pairs += 1
                yield RedditPair(parent_body, body, str(cid))
                if limit is not None and stats.pairs >= limit:
                    return
        seen[str(cid)] = body
        if len(seen) > capacity:
            seen.popitem(last=False)
            stats.evicted += 1
    if stats.skipped:
        logger.info("skipped %d malformed reddit lines", stats.skipped)


def pair_to_json(pair: RedditPair) -> dict:
    return {"pair_id": pair.pair_id, "parent": pair.parent_text, "child": pair.child_text}


def load_pairs(path: str | Path) -> list[RedditPair]:
    return [RedditPair(o["parent"], o["child"], str(o["pair_id"])) for o in read_jsonl(path)]
