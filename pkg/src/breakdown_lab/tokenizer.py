"""WordPiece vocabulary training, greedy longest-match encoding, and pair layout."""

from __future__ import annotations

import hashlib
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
NUM_SPECIAL = len(SPECIAL_TOKENS)
CONT = "##"

_WS = re.compile(r"\s+")


class TokenizerError(ValueError):
    pass


def normalize(text: str) -> str:
    """Lowercase, NFC-normalize and collapse whitespace."""
    text = unicodedata.normalize("NFC", text).lower()
    return _WS.sub(" ", text).strip()


def split_words(text: str) -> list[str]:
    text = normalize(text)
    return text.split(" ") if text else []


class Vocab:
    """Immutable piece list; the line number of a piece in the vocab file is its id."""

    def __init__(self, pieces: Sequence[str]):
        pieces = list(pieces)
        if tuple(pieces[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise TokenizerError(f"first {NUM_SPECIAL} pieces must be {SPECIAL_TOKENS}")
        piece_to_id: dict[str, int] = {}
        for i, piece in enumerate(pieces):
            if piece in piece_to_id:
                raise TokenizerError(f"duplicate piece {piece!r} at id {i}")
            if i >= NUM_SPECIAL:
                if piece in SPECIAL_TOKENS:
                    raise TokenizerError(f"special token {piece!r} repeated at id {i}")
                body = piece[len(CONT):] if piece.startswith(CONT) else piece
                if not body or _WS.search(piece):
                    raise TokenizerError(f"invalid piece {piece!r} at id {i}")
            piece_to_id[piece] = i
        self.pieces: tuple[str, ...] = tuple(pieces)
        self.piece_to_id = piece_to_id

    def __len__(self) -> int:
        return len(self.pieces)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.pieces == other.pieces

    def __hash__(self) -> int:
        return hash(self.pieces)

    def id(self, piece: str) -> int:
        return self.piece_to_id[piece]

    def to_text(self) -> str:
        return "".join(p + "\n" for p in self.pieces)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def _pair_scores(
    word_splits: dict[str, list[str]],
    word_counts: Counter,
    retained: set[str],
    min_frequency: int,
) -> tuple[Counter, Counter]:
    piece_counts: Counter = Counter()
    pair_counts: Counter = Counter()
    for word, symbols in word_splits.items():
        c = word_counts[word]
        for s in symbols:
            piece_counts[s] += c
        for a, b in zip(symbols, symbols[1:]):
            if a in retained and b in retained:
                pair_counts[a, b] += c
    pair_counts = Counter({k: v for k, v in pair_counts.items() if v >= min_frequency})
    return piece_counts, pair_counts


def _merge_name(a: str, b: str) -> str:
    return a + (b[len(CONT):] if b.startswith(CONT) else b)


def train_wordpiece(corpus: Iterable[str], vocab_size: int, min_frequency: int = 1) -> Vocab:
    """Learn a WordPiece vocabulary by likelihood-scored pair merging.

    The alphabet (every character seen at least ``min_frequency`` times, in word-initial
    and ``##`` continuation forms as observed) is added first, in order of first
    appearance. Merges then pick the adjacent pair maximizing
    ``count(ab) / (count(a) * count(b))``; ties go to the higher pair count, then to the
    lexicographically smaller merged piece, so the result depends only on the corpus.
    """
    if vocab_size < 1 or min_frequency < 1:
        raise TokenizerError("vocab_size and min_frequency must be positive")
    word_counts: Counter = Counter()
    for line in corpus:
        word_counts.update(split_words(line))
    if not word_counts:
        raise TokenizerError("empty corpus")

    word_splits = {
        w: [w[0]] + [CONT + ch for ch in w[1:]] for w in word_counts
    }
    symbol_counts: Counter = Counter()
    for w, symbols in word_splits.items():
        for s in symbols:
            symbol_counts[s] += word_counts[w]
    alphabet = [s for s in symbol_counts if symbol_counts[s] >= min_frequency]
    if NUM_SPECIAL + len(alphabet) > vocab_size:
        raise TokenizerError("vocab size too small")

    pieces = list(SPECIAL_TOKENS) + alphabet
    retained = set(alphabet)
    while len(pieces) < vocab_size:
        piece_counts, pair_counts = _pair_scores(word_splits, word_counts, retained, min_frequency)
        if not pair_counts:
            break
        best = max(
            pair_counts.items(),
            key=lambda kv: (
                kv[1] / (piece_counts[kv[0][0]] * piece_counts[kv[0][1]]),
                kv[1],
                _invert(_merge_name(*kv[0])),
            ),
        )
        (a, b), _ = best
        merged = _merge_name(a, b)
        for w, symbols in word_splits.items():
            if len(symbols) < 2:
                continue
            out: list[str] = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            word_splits[w] = out
        if merged not in retained:
            retained.add(merged)
            pieces.append(merged)
    return Vocab(pieces)


def _invert(s: str) -> tuple[int, ...]:
    # max() over inverted code points prefers the lexicographically smallest string
    return tuple(-ord(ch) for ch in s) + (0,)


def _encode_word(vocab: Vocab, word: str) -> list[int]:
    ids: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            piece = word[start:end] if start == 0 else CONT + word[start:end]
            pid = vocab.piece_to_id.get(piece)
            if pid is not None and pid >= NUM_SPECIAL:
                found = pid
                break
            end -= 1
        if found is None:
            return [UNK_ID]
        ids.append(found)
        start = end
    return ids


def encode(vocab: Vocab, text: str) -> list[int]:
    """Greedy longest-match-first WordPiece; uncoverable words become one UNK."""
    ids: list[int] = []
    for word in split_words(text):
        ids.extend(_encode_word(vocab, word))
    return ids


def decode(vocab: Vocab, ids: Iterable[int]) -> str:
    words: list[str] = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= len(vocab):
            raise TokenizerError(f"unknown id {i}")
        if i < NUM_SPECIAL:
            continue
        piece = vocab.pieces[i]
        if piece.startswith(CONT):
            if words:
                words[-1] += piece[len(CONT):]
            else:
                words.append(piece[len(CONT):])
        else:
            words.append(piece)
    return " ".join(words)


@dataclass(frozen=True)
class EncodedPair:
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    length: int = field(default=0)

    def __post_init__(self) -> None:
        n = len(self.token_ids)
        if len(self.segment_ids) != n or len(self.attention_mask) != n:
            raise TokenizerError("token, segment and mask lengths differ")
        if self.length != sum(self.attention_mask):
            raise TokenizerError("length does not match attention mask")

    def real_ids(self) -> tuple[int, ...]:
        return self.token_ids[: self.length]

    def sep_index(self) -> int:
        return self.token_ids.index(SEP_ID)

    def segments(self) -> tuple[list[int], list[int]]:
        """Token ids of the first and second sentence, specials removed."""
        first_sep = self.sep_index()
        return list(self.token_ids[1:first_sep]), list(self.token_ids[first_sep + 1 : self.length - 1])

    def replace_ids(self, token_ids: Sequence[int]) -> "EncodedPair":
        return EncodedPair(tuple(int(t) for t in token_ids), self.segment_ids, self.attention_mask, self.length)


def truncate_pair(context: list[int], utterance: list[int], budget: int) -> tuple[list[int], list[int]]:
    """Fit both id lists in ``budget`` tokens.

    The context loses tokens from its front first (the most recent context survives);
    only once the context is empty does the utterance lose tokens from its tail.
    """
    overflow = len(context) + len(utterance) - budget
    if overflow <= 0:
        return context, utterance
    drop_ctx = min(overflow, len(context))
    context = context[drop_ctx:]
    overflow -= drop_ctx
    if overflow > 0:
        utterance = utterance[: len(utterance) - overflow]
    return context, utterance


def layout_pair(context: Sequence[int], utterance: Sequence[int], max_len: int, pad: bool = True) -> EncodedPair:
    ctx, utt = truncate_pair(list(context), list(utterance), max_len - 3)
    ids = [CLS_ID, *ctx, SEP_ID, *utt, SEP_ID]
    segs = [0] * (len(ctx) + 2) + [1] * (len(utt) + 1)
    n = len(ids)
    mask = [1] * n
    if pad:
        extra = max_len - n
        ids += [PAD_ID] * extra
        segs += [1] * extra
        mask += [0] * extra
    return EncodedPair(tuple(ids), tuple(segs), tuple(mask), n)


def encode_pair(vocab: Vocab, context: str, utterance: str, max_len: int, pad: bool = True) -> EncodedPair:
    """Render ``[CLS] context [SEP] utterance [SEP] [PAD]...``.

    Padding positions carry segment id 1 (keeping segment ids non-decreasing) and
    attention 0. With ``pad=False`` the
    sequence stops at the last real token; batching pads on demand.
    """
    if max_len < 8:
        raise TokenizerError("max_len must be at least 8")
    return layout_pair(encode(vocab, context), encode(vocab, utterance), max_len, pad=pad)
