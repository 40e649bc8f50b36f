"""Character corpus: vocabulary, positional 80/10/10 split, batch sampling."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Sequence

import numpy as np

from .errors import DataError

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class CharVocab:
    chars: str

    @classmethod
    def from_text(cls, text: str) -> "CharVocab":
        return cls("".join(sorted(set(text))))

    @property
    def size(self) -> int:
        return len(self.chars)

    def __len__(self):
        return len(self.chars)

    @property
    def stoi(self) -> Dict[str, int]:
        return {c: i for i, c in enumerate(self.chars)}

    def encode(self, s: str) -> np.ndarray:
        stoi = self.stoi
        try:
            return np.array([stoi[c] for c in s], dtype=np.int64)
        except KeyError as err:
            raise DataError(f"character {err.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.chars[int(i)] for i in ids)

    def start_id(self) -> int:
        """Id of the newline character, used to seed generation from an empty prompt."""
        return self.chars.index("\n") if "\n" in self.chars else 0


@dataclass
class Corpus:
    vocab: CharVocab
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    path: str = ""
    sha256: str = ""

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


def split_bounds(n: int) -> tuple:
    """End offsets of the train and val splits; pure function of the corpus length."""
    a = int(n * SPLIT_FRACTIONS[0])
    b = a + int(n * SPLIT_FRACTIONS[1])
    return a, b


def corpus_from_text(text: str, path: str = "") -> Corpus:
    if not text:
        raise DataError(f"empty corpus {path}".strip())
    vocab = CharVocab.from_text(text)
    ids = vocab.encode(text)
    a, b = split_bounds(len(ids))
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return Corpus(vocab, ids[:a], ids[a:b], ids[b:], path, digest)


def load_corpus(path) -> Corpus:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as err:
        raise DataError(f"{path} is not UTF-8 text: {err}") from None
    return corpus_from_text(text, str(path.resolve()))


def sample_batch(split: np.ndarray, batch_size: int, context_length: int, rng: np.random.Generator):
    """``(x, y)`` of shape ``[B, T]`` with ``y`` the next-character targets."""
    n = len(split)
    if n <= context_length:
        raise DataError(f"split of length {n} too short for context {context_length}")
    offs = rng.integers(0, n - context_length, size=batch_size)
    idx = offs[:, None] + np.arange(context_length)[None, :]
    return split[idx], split[idx + 1]
