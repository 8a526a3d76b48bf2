"""Corpus loading, vocabularies and contiguous LM batching."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

from .nnkit import DataError

UNK = "<unk>"
UNK_ID = 0
VALID_FRACTION = 0.1


def bundled_corpus() -> str:
    """The ~0.9 MB English text shipped with the package."""
    return resources.files("odeblocks.data").joinpath("corpus.txt").read_text(encoding="utf-8")


def load_corpus(path=None) -> str:
    if path is None:
        return bundled_corpus()
    return Path(path).read_text(encoding="utf-8")


def split_text(text: str, valid_fraction: float = VALID_FRACTION) -> tuple[str, str]:
    """Split at a fixed character offset: first 90% train, the rest valid."""
    cut = int(len(text) * (1.0 - valid_fraction))
    return text[:cut], text[cut:]


class Vocab:
    def __init__(self, level: str, tokens: list[str]):
        if level not in ("char", "word"):
            raise ValueError(f"unknown vocab level {level!r}")
        if tokens[:1] != [UNK]:
            tokens = [UNK, *tokens]
        self.level = level
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and (self.level, self.itos) == (other.level, other.itos)

    def tokenize(self, text: str) -> list[str]:
        return list(text) if self.level == "char" else text.split()

    def encode(self, text: str) -> np.ndarray:
        get = self.stoi.get
        return np.array([get(t, UNK_ID) for t in self.tokenize(text)], dtype=np.int64)

    def decode(self, ids) -> str:
        toks = [self.itos[int(i)] for i in ids]
        return "".join(toks) if self.level == "char" else " ".join(toks)

    def save(self, path) -> None:
        lines = [f"{i}\t{_escape(t)}" for i, t in enumerate(self.itos)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, level: str = "char") -> "Vocab":
        rows = [ln for ln in Path(path).read_text(encoding="utf-8").split("\n") if ln]
        tokens = []
        for expected, row in enumerate(rows):
            idx, tok = row.split("\t", 1)
            if int(idx) != expected:
                raise DataError(f"vocab file ids out of order at {idx}")
            tokens.append(_unescape(tok))
        return cls(level, tokens)


def _escape(tok: str) -> str:
    if tok == UNK:
        return tok
    return "".join(c if c.isprintable() and c not in "\\\t" else _code(c) for c in tok)


def _code(c: str) -> str:
    n = ord(c)
    return f"\\u{n:04x}" if n <= 0xFFFF else f"\\U{n:08x}"


def _unescape(tok: str) -> str:
    if tok == UNK:
        return tok
    out, i = [], 0
    while i < len(tok):
        if tok.startswith("\\u", i):
            out.append(chr(int(tok[i + 2:i + 6], 16)))
            i += 6
        elif tok.startswith("\\U", i):
            out.append(chr(int(tok[i + 2:i + 10], 16)))
            i += 10
        else:
            out.append(tok[i])
            i += 1
    return "".join(out)


def build_vocab(text: str, level: str = "char", max_size: int | None = None) -> Vocab:
    """Most frequent tokens first (ties broken by token), ``max_size`` including unk."""
    if not text:
        raise DataError("empty corpus")
    toks = list(text) if level == "char" else text.split()
    if not toks:
        raise DataError("corpus has no tokens")
    ranked = sorted(Counter(toks).items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [t for t, _ in ranked]
    if max_size is not None:
        keep = keep[: max(0, max_size - 1)]
    return Vocab(level, [UNK, *keep])


@dataclass
class Batch:
    inputs: np.ndarray   # [batch, seq]
    targets: np.ndarray  # [batch, seq]


def batchify(ids, batch: int, seq: int) -> list[Batch]:
    """Split ``ids`` into ``batch`` contiguous lanes and cut non-overlapping windows.

    Targets are the inputs shifted by one, continuing into the next window.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if batch < 1 or seq < 1:
        raise ValueError("batch and seq must be positive")
    if len(ids) < batch * (seq + 1):
        raise DataError(f"stream of {len(ids)} tokens too short for batch {batch} x seq {seq}")
    lane = len(ids) // batch
    lanes = ids[: lane * batch].reshape(batch, lane)
    n = (lane - 1) // seq
    return [Batch(lanes[:, k * seq:(k + 1) * seq], lanes[:, k * seq + 1:(k + 1) * seq + 1])
            for k in range(n)]


def iter_epochs(batches: list[Batch], rng: np.random.Generator) -> Iterator[Batch]:
    """Endless stream of batches, reshuffled (by window) each epoch."""
    while True:
        for k in rng.permutation(len(batches)):
            yield batches[k]
