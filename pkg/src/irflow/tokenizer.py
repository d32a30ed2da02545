"""Byte-level BPE tokenizer trained from IR text."""

from __future__ import annotations

import json
import re
from collections import Counter
from pathlib import Path
from typing import Iterable

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD, UNK, CLS, SEP, MASK = range(len(SPECIALS))

# Whitespace attaches to the following word so chunks concatenate back to the text.
_CHUNK_RE = re.compile(r"\s?\S+|\s+")


class EmptyCorpus(ValueError):
    pass


def _chunks(text: str) -> list[str]:
    # latin-1 maps every byte to one char, so token strings are byte strings
    return _CHUNK_RE.findall(text.encode("utf-8").decode("latin-1"))


class Tokenizer:
    """Trained BPE vocabulary.

    Ids ``0..4`` are the special tokens, followed by the base byte alphabet
    (bytes seen during training) and then one id per learned merge.
    """

    def __init__(self, alphabet: list[str], merges: list[tuple[str, str]]):
        self.alphabet = list(alphabet)
        self.merges = [tuple(m) for m in merges]
        self.specials = {s: i for i, s in enumerate(SPECIALS)}
        tokens = list(SPECIALS) + self.alphabet + [a + b for a, b in self.merges]
        self.id_to_token = tokens
        self.vocab = {}
        for i, t in enumerate(tokens):
            self.vocab.setdefault(t, i)
        self._ranks = {m: r for r, m in enumerate(self.merges)}
        self._cache: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    @property
    def first_regular_id(self) -> int:
        return len(SPECIALS)

    def _bpe(self, chunk: str) -> list[int]:
        if chunk in self._cache:
            return self._cache[chunk]
        parts = list(chunk)
        while len(parts) > 1:
            best, best_rank = None, None
            for i in range(len(parts) - 1):
                r = self._ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            parts[best : best + 2] = [parts[best] + parts[best + 1]]
        ids = [self.vocab.get(p, UNK) for p in parts]
        self._cache[chunk] = ids
        return ids

    def tokenize(self, text: str) -> list[int]:
        """Token ids without any special tokens."""
        out = []
        for c in _chunks(text):
            out.extend(self._bpe(c))
        return out

    def encode(self, text: str, max_len: int) -> list[int]:
        """``[CLS]`` followed by the tokens of ``text``, right-truncated to ``max_len``."""
        if max_len < 1:
            raise ValueError("max_len must be positive")
        return ([CLS] + self.tokenize(text))[:max_len]

    def decode(self, ids: Iterable[int]) -> str:
        pieces = [self.id_to_token[i] for i in ids if i >= len(SPECIALS)]
        return "".join(pieces).encode("latin-1").decode("utf-8", errors="replace")

    def to_dict(self) -> dict:
        return {
            "merges": [list(m) for m in self.merges],
            "specials": dict(self.specials),
            "alphabet": self.alphabet,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        if d.get("specials", dict(zip(SPECIALS, range(5)))) != dict(zip(SPECIALS, range(5))):
            raise ValueError("unsupported special-token layout")
        return cls(d["alphabet"], [tuple(m) for m in d["merges"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_bpe(corpus: Iterable[str], vocab_size: int) -> Tokenizer:
    """Learn merges until the vocabulary reaches ``vocab_size``.

    Ties between equally frequent pairs go to the lexicographically smallest
    pair.  Training stops early once every chunk is a single token.
    """
    words = Counter()
    for text in corpus:
        words.update(_chunks(text))
    if not words:
        raise EmptyCorpus("tokenizer corpus is empty")
    alphabet = sorted({ch for w in words for ch in w})
    base = len(SPECIALS) + len(alphabet)
    if vocab_size < base:
        raise ValueError(f"vocab_size {vocab_size} below base size {base}")

    seqs = [(list(w), c) for w, c in sorted(words.items())]
    merges = []
    while base + len(merges) < vocab_size:
        pairs = Counter()
        for parts, c in seqs:
            for i in range(len(parts) - 1):
                pairs[(parts[i], parts[i + 1])] += c
        if not pairs:
            break
        top = max(pairs.values())
        pair = min(p for p, c in pairs.items() if c == top)
        merges.append(pair)
        merged = pair[0] + pair[1]
        for parts, _ in seqs:
            i = 0
            while i < len(parts) - 1:
                if parts[i] == pair[0] and parts[i + 1] == pair[1]:
                    parts[i : i + 2] = [merged]
                i += 1
    return Tokenizer(alphabet, merges)
