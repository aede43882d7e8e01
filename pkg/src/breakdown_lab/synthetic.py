"""Generated stand-ins for the DBDC dialogues and a Reddit comment dump.

Each topic owns a word list. A user turn mentions two words of one topic; the labelled
system reply mentions two topic words. The majority label is fixed by how many of the
reply's topic words come from a different topic than the user turn:

    none -> NB, some -> SB, all -> B

Annotator votes are noisy around that majority (the majority always holds >= 8 of 15).
Reddit threads pair comments that stay on their parent's topic most of the time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TOPICS: dict[str, tuple[str, ...]] = {
    "food": ("pizza", "pasta", "salad", "bread", "cheese", "soup", "noodles", "rice"),
    "sports": ("soccer", "tennis", "hockey", "rugby", "golf", "cricket", "baseball", "boxing"),
    "music": ("guitar", "piano", "violin", "drums", "jazz", "opera", "concert", "songs"),
    "travel": ("airport", "hotel", "beach", "museum", "passport", "train", "island", "luggage"),
    "weather": ("rain", "snow", "storm", "sunshine", "thunder", "fog", "wind", "clouds"),
    "pets": ("puppy", "kitten", "parrot", "hamster", "goldfish", "rabbit", "turtle", "pony"),
}
USER_TEMPLATES = (
    "i really like {a} and {b}",
    "do you know about {a} or {b}",
    "yesterday i talked about {a} with {b}",
    "what do you think of {a} and {b}",
    "my friend loves {a} and also {b}",
    "tell me something about {a} and {b}",
)
SYSTEM_TEMPLATES = (
    "yes {a} is great and {b} too",
    "i think {a} goes well with {b}",
    "oh {a} sounds nice and {b} as well",
    "well {a} and {b} are my favorite",
    "really i prefer {a} over {b}",
    "sure we can talk about {a} and {b}",
)
GREETINGS = ("hello how are you today", "hi there nice to meet you", "good morning what is new")
LABEL_MIX = (0.55, 0.07, 0.38)  # B, SB, NB
VOTE_SYMBOL = {"B": "X", "SB": "T", "NB": "O"}


@dataclass(frozen=True)
class SyntheticCorpus:
    root: Path
    train: Path
    valid: Path
    test: Path
    reddit: Path


def _votes(rng: np.random.Generator, label: str, annotators: int = 15) -> list[str]:
    majority = int(rng.integers(8, annotators + 1))
    others = [x for x in ("B", "SB", "NB") if x != label]
    rest = annotators - majority
    first = int(rng.integers(0, rest + 1))
    votes = [label] * majority + [others[0]] * first + [others[1]] * (rest - first)
    rng.shuffle(votes)
    return votes


def _pick_two(rng: np.random.Generator, topic: str) -> list[str]:
    words = TOPICS[topic]
    idx = rng.choice(len(words), size=2, replace=False)
    return [words[int(i)] for i in idx]


def _other_topic(rng: np.random.Generator, topic: str) -> str:
    names = [t for t in TOPICS if t != topic]
    return names[int(rng.integers(len(names)))]


def label_for(context_topic: str, reply_words: list[str]) -> str:
    """The deterministic labelling rule, usable as an oracle in tests."""
    word_topic = {w: t for t, ws in TOPICS.items() for w in ws}
    off = sum(word_topic[w] != context_topic for w in reply_words)
    if off == 0:
        return "NB"
    return "B" if off == len(reply_words) else "SB"


def _exchange(rng: np.random.Generator) -> tuple[str, str, str]:
    names = list(TOPICS)
    topic = names[int(rng.integers(len(names)))]
    a, b = _pick_two(rng, topic)
    user = USER_TEMPLATES[int(rng.integers(len(USER_TEMPLATES)))].format(a=a, b=b)
    label = ("B", "SB", "NB")[int(rng.choice(3, p=LABEL_MIX))]
    if label == "NB":
        words = _pick_two(rng, topic)
    elif label == "B":
        words = _pick_two(rng, _other_topic(rng, topic))
    else:
        words = [_pick_two(rng, topic)[0], _pick_two(rng, _other_topic(rng, topic))[0]]
        rng.shuffle(words)
    assert label_for(topic, words) == label
    reply = SYSTEM_TEMPLATES[int(rng.integers(len(SYSTEM_TEMPLATES)))].format(a=words[0], b=words[1])
    return user, reply, label


def make_dialogue(rng: np.random.Generator, dialogue_id: str) -> dict:
    turns = []
    if rng.random() < 0.3:
        turns.append({"speaker": "S", "utterance": GREETINGS[int(rng.integers(len(GREETINGS)))], "annotations": []})
    exchanges = 2 if rng.random() < 0.3 else 1
    for _ in range(exchanges):
        user, reply, label = _exchange(rng)
        turns.append({"speaker": "U", "utterance": user, "annotations": []})
        votes = _votes(rng, label)
        turns.append(
            {"speaker": "S", "utterance": reply, "annotations": [{"breakdown": VOTE_SYMBOL[v]} for v in votes]}
        )
    for i, t in enumerate(turns):
        t["turn-index"] = i
    ordered = [{"turn-index": t["turn-index"], "speaker": t["speaker"], "utterance": t["utterance"],
                "annotations": t["annotations"]} for t in turns]
    return {"dialogue-id": dialogue_id, "turns": ordered}


def reddit_lines(rng: np.random.Generator, num_pairs: int) -> list[str]:
    """Pushshift-style comment lines yielding at least ``num_pairs`` usable pairs.

    Threads are a root comment with two replies; some comments are deleted and a few
    lines are malformed, so extraction filters are exercised.
    """
    lines: list[str] = []
    names = list(TOPICS)
    made = 0
    thread = 0
    while made < num_pairs:
        thread += 1
        topic = names[int(rng.integers(len(names)))]
        root_id = f"r{thread}"
        a, b = _pick_two(rng, topic)
        root_body = USER_TEMPLATES[int(rng.integers(len(USER_TEMPLATES)))].format(a=a, b=b)
        deleted = rng.random() < 0.03
        lines.append(json.dumps({"id": root_id, "parent_id": f"t3_s{thread}",
                                 "body": "[deleted]" if deleted else root_body}))
        for k in range(2):
            reply_topic = topic if rng.random() < 0.9 else _other_topic(rng, topic)
            c, d = _pick_two(rng, reply_topic)
            body = SYSTEM_TEMPLATES[int(rng.integers(len(SYSTEM_TEMPLATES)))].format(a=c, b=d)
            lines.append(json.dumps({"id": f"{root_id}c{k}", "parent_id": f"t1_{root_id}", "body": body}))
            if not deleted:
                made += 1
        if rng.random() < 0.01:
            lines.append("{not json")
    return lines


def write_corpus(
    root: str | Path,
    num_dialogues: int = 2000,
    num_reddit_pairs: int = 5000,
    split: tuple[float, float] = (0.7, 0.15),
    seed: int = 0,
) -> SyntheticCorpus:
    """Write DBDC-format dialogue files (one per dialogue) per split and a Reddit dump."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    n_train = int(num_dialogues * split[0])
    n_valid = int(num_dialogues * split[1])
    dirs = {"train": root / "train", "valid": root / "valid", "test": root / "test"}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    for i in range(num_dialogues):
        name = "train" if i < n_train else "valid" if i < n_train + n_valid else "test"
        dlg = make_dialogue(rng, f"synth{i:05d}")
        (dirs[name] / f"synth{i:05d}.json").write_text(json.dumps(dlg, indent=1) + "\n", encoding="utf-8")
    reddit = root / "reddit.jsonl"
    reddit.write_text("".join(line + "\n" for line in reddit_lines(rng, num_reddit_pairs)), encoding="utf-8")
    return SyntheticCorpus(root, dirs["train"], dirs["valid"], dirs["test"], reddit)


DESK_CONFIG = """\
# Desk-scale settings for the synthetic corpus (one CPU core, well under 10 minutes).
[paths]
train = train
valid = valid
test = test
reddit = reddit.jsonl
output_dir = run

[tokenizer]
vocab_size = 8000

[model]
max_len = 32
hidden_dim = 64
num_layers = 2
num_heads = 4
ffn_dim = 128
dropout_rate = 0.0

[pretrain]
epochs = 40
batch_size = 32
learning_rate = 1e-3
warmup_steps = 200
pairs_limit = 5000

[augment]
select_prob = 0.45
num_augments = 2
strategy = sample
label_mode = soft

[finetune]
epochs = 15
batch_size = 32
learning_rate = 1e-3
augmented_epochs = 6

[ensemble]
members = 8
top = 4
metric = accuracy

[run]
seed = 0
threads = 1
"""


def write_config_for(corpus: SyntheticCorpus, name: str = "pipeline.cfg") -> Path:
    path = corpus.root / name
    path.write_text(DESK_CONFIG, encoding="utf-8")
    return path
