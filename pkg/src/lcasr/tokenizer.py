"""Byte-level BPE vocabulary with a reserved CTC blank as the final index.

Every string is encoded as if prefixed by one space, so that each word carries
its own leading-space piece and ``encode(a + " " + b) == encode(a) + encode(b)``
for whitespace-free words. ``decode`` strips that leading space again.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

BASE_SIZE = 256
_PRETOKENIZE = re.compile(r" ?\S+|\s+(?!\S)|\s+")


def _to_str(piece: bytes) -> str:
    return piece.decode("latin-1")


def _to_bytes(piece: str) -> bytes:
    return piece.encode("latin-1")


def _chunks(text: str) -> list[bytes]:
    return [m.group().encode("utf-8") for m in _PRETOKENIZE.finditer(" " + text)]


@dataclass
class Vocabulary:
    pieces: list[bytes]
    merges: list[tuple[bytes, bytes]]
    _ids: dict = field(init=False, repr=False, compare=False)
    _ranks: dict = field(init=False, repr=False, compare=False)
    _cache: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._ids = {p: i for i, p in enumerate(self.pieces)}
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache = {}

    @property
    def blank_id(self) -> int:
        return len(self.pieces)

    @property
    def size(self) -> int:
        """Number of output classes including the blank."""
        return len(self.pieces) + 1

    def _bpe(self, chunk: bytes) -> list[int]:
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        parts = [bytes([b]) for b in chunk]
        while len(parts) > 1:
            ranked = [(self._ranks.get((a, b), None), i) for i, (a, b) in enumerate(zip(parts, parts[1:]))]
            ranked = [(r, i) for r, i in ranked if r is not None]
            if not ranked:
                break
            rank = min(r for r, _ in ranked)
            pair = self.merges[rank]
            merged, i = [], 0
            while i < len(parts):
                if i + 1 < len(parts) and (parts[i], parts[i + 1]) == pair:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        ids = [self._ids[p] for p in parts]
        self._cache[chunk] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out = []
        for chunk in _chunks(text):
            out.extend(self._bpe(chunk))
        return out

    def encode_words(self, words: Sequence[str]) -> list[int]:
        return self.encode(" ".join(words)) if words else []

    def decode(self, ids: Iterable[int]) -> str:
        buf = bytearray()
        for i in ids:
            i = int(i)
            if i == self.blank_id:
                raise ValueError(f"id {i} is the reserved blank symbol")
            if not 0 <= i < len(self.pieces):
                raise ValueError(f"unknown token id {i}")
            buf += self.pieces[i]
        text = buf.decode("utf-8", errors="replace")
        return text[1:] if text.startswith(" ") else text

    def piece_text(self, i: int) -> str:
        return self.pieces[i].decode("utf-8", errors="replace")

    def starts_word(self, i: int) -> bool:
        return self.pieces[i][:1].isspace()

    # ------------------------------------------------------------- persistence

    def to_json(self) -> str:
        doc = {
            "pieces": [_to_str(p) for p in self.pieces],
            "merges": [[_to_str(a), _to_str(b)] for a, b in self.merges],
        }
        return json.dumps(doc, ensure_ascii=True, separators=(",", ":"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        pieces = [_to_bytes(p) for p in doc["pieces"]]
        merges = [(_to_bytes(a), _to_bytes(b)) for a, b in doc["merges"]]
        if pieces[:BASE_SIZE] != [bytes([b]) for b in range(BASE_SIZE)]:
            raise ValueError("vocabulary does not start with the 256 byte pieces")
        return cls(pieces, merges)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def bpe_train(corpus: Sequence[str], vocab_size: int = 256) -> Vocabulary:
    """Greedy BPE: merge the most frequent adjacent pair until ``vocab_size`` pieces exist.

    Ties go to the lexicographically smallest pair. Training stops early once no
    chunk has more than one piece left.
    """
    if not corpus or not any(corpus):
        raise ValueError("cannot train BPE on an empty corpus")
    if vocab_size < BASE_SIZE:
        raise ValueError(f"vocab_size must be at least the {BASE_SIZE} byte pieces, got {vocab_size}")
    freqs = Counter()
    for line in corpus:
        freqs.update(_chunks(line))
    words = [[bytes([b]) for b in chunk] for chunk in freqs]
    counts = list(freqs.values())
    pieces = [bytes([b]) for b in range(BASE_SIZE)]
    known = set(pieces)
    merges: list[tuple[bytes, bytes]] = []
    while len(pieces) < vocab_size:
        pairs = Counter()
        for parts, c in zip(words, counts):
            for pair in zip(parts, parts[1:]):
                pairs[pair] += c
        if not pairs:
            break
        best_count = max(pairs.values())
        best = min(p for p, c in pairs.items() if c == best_count)
        merges.append(best)
        joined = best[0] + best[1]
        if joined not in known:
            known.add(joined)
            pieces.append(joined)
        for w, parts in enumerate(words):
            if len(parts) < 2:
                continue
            out, i = [], 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == best[0] and parts[i + 1] == best[1]:
                    out.append(joined)
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            words[w] = out
    return Vocabulary(pieces, merges)
