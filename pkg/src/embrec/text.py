"""Tokenization and vocabularies for titles, aspects and query text."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError

PAD = "<pad>"
OOV = "<oov>"
PAD_ID = 0
OOV_ID = 1

_NON_ALNUM = re.compile(r"[^A-Za-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Replace every non-alphanumeric character by whitespace, split, lowercase.

    >>> tokenize("Apple iPhone-11, 64GB!")
    ['apple', 'iphone', '11', '64gb']
    """
    return _NON_ALNUM.sub(" ", text).lower().split()


def aspect_token(aspect: str) -> str | None:
    """Turn a raw ``"key:value"`` aspect into a single vocabulary token.

    Key and value are filtered separately; multi-word parts are joined with
    ``_`` so that the pair stays one unit. Returns None for an aspect with no
    alphanumeric content at all.
    """
    key, _, value = aspect.partition(":")
    k = "_".join(tokenize(key))
    v = "_".join(tokenize(value))
    if not k and not v:
        return None
    return f"{k}:{v}"


def aspect_tokens(aspects: Iterable[str]) -> list[str]:
    return [t for t in (aspect_token(a) for a in aspects) if t is not None]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    max_size: int
    min_frequency: int = 1
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:2] != (PAD, OOV):
            raise FormatError("vocabulary must start with PAD and OOV")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self.index.get(token, OOV_ID)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(corpus: Iterable[str], max_size: int, min_frequency: int = 1) -> Vocabulary:
    """Rank tokens by (frequency desc, token asc) and keep ``max_size - 2``."""
    if max_size < 2:
        raise ValueError("max_size must be >= 2")
    counts = Counter(t for t in corpus if t not in (PAD, OOV))
    ranked = sorted(
        (t for t, c in counts.items() if c >= min_frequency),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary((PAD, OOV, *ranked[: max_size - 2]), max_size, min_frequency)


def encode(vocab: Vocabulary, tokens: Iterable[str]) -> list[int]:
    return [vocab.lookup(t) for t in tokens]


_HEADER = "# embrec vocabulary v1: token id = line index after this header, from 0; max_size={} min_frequency={}"


def save_vocab(vocab: Vocabulary, path) -> None:
    lines = [_HEADER.format(vocab.max_size, vocab.min_frequency), *vocab.tokens]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#"):
        raise FormatError(f"{path}: missing vocabulary header")
    meta = dict(part.split("=", 1) for part in lines[0].split() if "=" in part)
    try:
        max_size = int(meta.get("max_size", len(lines) - 1))
        min_frequency = int(meta.get("min_frequency", 1))
    except ValueError as exc:
        raise FormatError(f"{path}: bad vocabulary header") from exc
    return Vocabulary(tuple(lines[1:]), max_size, min_frequency)
