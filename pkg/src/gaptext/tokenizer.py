"""Frequency vocabulary with digit splitting, encode/decode with char offsets."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

PAD, UNK, BOS = "<pad>", "<unk>", "<bos>"
PAD_ID, UNK_ID, BOS_ID = 0, 1, 2
SPECIALS = (PAD, UNK, BOS)

# word runs (letters/underscore), single digits, or any single other
# non-space character
_PIECE = re.compile(r"[^\W\d]+|\d|[^\w\s]", re.UNICODE)


def pretokenize(text: str) -> list[tuple[str, int, int]]:
    return [(m.group(), m.start(), m.end()) for m in _PIECE.finditer(text)]


def normalize(text: str) -> str:
    """Canonical form produced by decode for UNK-free text."""
    return " ".join(p for p, _, _ in pretokenize(text))


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:3] != SPECIALS:
            raise ValueError("vocab must start with <pad>, <unk>, <bos>")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def id(self, piece: str) -> int:
        return self._ids.get(piece, UNK_ID)

    def __contains__(self, piece):
        return piece in self._ids

    def save(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for i, t in enumerate(self.tokens):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        rows = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                tok, idx = line.rsplit("\t", 1)
                rows.append((int(idx), tok))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: ids are not dense 0..n-1")
        return cls(tuple(t for _, t in rows))


def build_vocab(corpus, max_size: int = 1000) -> Vocab:
    """Most frequent pieces first, ties broken lexicographically."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    if max_size < 4:
        raise ValueError("max_size must be >= 4")
    counts = Counter(p for text in corpus for p, _, _ in pretokenize(text))
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [p for p, _ in ranked[: max_size - len(SPECIALS)]]
    return Vocab(SPECIALS + tuple(keep))


@dataclass
class TokenSeq:
    ids: list[int]
    mask: list[int]
    offsets: list[tuple[int, int]]
    truncated: bool = False

    def __len__(self):
        return len(self.ids)


def encode(v: Vocab, text: str, max_len: int = 512) -> TokenSeq:
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    pieces = pretokenize(text)
    truncated = len(pieces) + 1 > max_len
    pieces = pieces[: max_len - 1]
    ids = [BOS_ID] + [v.id(p) for p, _, _ in pieces]
    offsets = [(0, 0)] + [(s, e) for _, s, e in pieces]
    return TokenSeq(ids, [1] * len(ids), offsets, truncated)


def decode(v: Vocab, ts: TokenSeq) -> str:
    out = []
    for i in ts.ids:
        if not 0 <= i < len(v):
            raise ValueError(f"token id {i} outside vocabulary of size {len(v)}")
        if i in (PAD_ID, BOS_ID):
            continue
        out.append(v.tokens[i])
    return " ".join(out)


def char_span_to_token_span(ts: TokenSeq, char_start: int, char_end: int):
    """Inclusive token range whose offsets intersect [char_start, char_end),
    or None when no surviving token does."""
    if char_start > char_end:
        raise ValueError("char_start > char_end")
    hit = [
        i for i, (s, e) in enumerate(ts.offsets)
        if ts.mask[i] and e > s and s < char_end and e > char_start
    ]
    if not hit:
        return None
    return hit[0], hit[-1]


def token_spans(ts: TokenSeq, spans) -> dict:
    """feature -> (t_start, t_end) or None, from (name, char_start, char_end) triples."""
    return {name: char_span_to_token_span(ts, s, e) for name, s, e in spans}
