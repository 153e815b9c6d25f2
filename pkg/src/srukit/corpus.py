"""Byte-level corpus ingestion with a positional train/valid/test split."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from srukit.exceptions import CorpusError

TRAIN_FRACTION = 0.9


@dataclass(frozen=True)
class Corpus:
    """Token ids for the three splits plus the byte vocabulary.

    ``vocab`` lists the byte values seen in the training split in ascending
    order; id ``len(vocab)`` is reserved for bytes never seen in training.
    """

    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    vocab: tuple[int, ...]

    @property
    def unk_id(self) -> int:
        return len(self.vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 1

    def decode(self, ids) -> bytes:
        return bytes(self.vocab[i] if i < len(self.vocab) else ord("?") for i in ids)


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(TRAIN_FRACTION * n)
    n_valid = (n - n_train) // 2
    return n_train, n_valid, n - n_train - n_valid


def corpus_from_bytes(data: bytes) -> Corpus:
    if len(data) == 0:
        raise CorpusError("corpus is empty")
    raw = np.frombuffer(data, dtype=np.uint8)
    n_train, n_valid, _ = split_sizes(raw.size)
    if n_train < 2:
        raise CorpusError(f"corpus of {raw.size} bytes is too small to split")
    vocab = tuple(int(b) for b in np.unique(raw[:n_train]))
    lut = np.full(256, len(vocab), dtype=np.int64)
    lut[list(vocab)] = np.arange(len(vocab))
    ids = lut[raw]
    return Corpus(train=ids[:n_train], valid=ids[n_train:n_train + n_valid],
                  test=ids[n_train + n_valid:], vocab=vocab)


def load_corpus(path: str | os.PathLike) -> Corpus:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {os.fspath(path)!r}: {exc.strerror}") from exc
    return corpus_from_bytes(data)


def alternating_corpus(n: int = 10_000, symbols: bytes = b"ab") -> bytes:
    reps = -(-n // len(symbols))
    return (symbols * reps)[:n]
