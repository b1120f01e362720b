"""Byte-level corpus ingestion and fixed-window packing."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusStream:
    path: str
    tokens: np.ndarray
    n_train: int

    @property
    def train(self) -> np.ndarray:
        return self.tokens[: self.n_train]

    @property
    def val(self) -> np.ndarray:
        return self.tokens[self.n_train:]


def encode(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_corpus(path, val_fraction: float = 0.1) -> CorpusStream:
    """Read ``path`` as raw bytes; the last ``val_fraction`` of tokens is the validation split."""
    if not 0 < val_fraction < 1:
        raise CorpusError("val_fraction must lie in (0, 1)")
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path!r}: {exc}") from exc
    if not raw:
        raise CorpusError(f"corpus {path!r} is empty")
    tokens = encode(raw)
    n_val = int(round(len(tokens) * val_fraction))
    return CorpusStream(path=os.fspath(path), tokens=tokens, n_train=len(tokens) - n_val)


def pack_windows(tokens: np.ndarray, seq_len: int) -> np.ndarray:
    """Cut ``tokens`` into contiguous, non-overlapping windows of ``seq_len + 1``.

    Each window yields ``seq_len`` inputs and the same positions shifted by one as
    targets. The tail that does not fill a window is dropped.
    """
    w = seq_len + 1
    n = len(tokens) // w
    return np.asarray(tokens[: n * w], dtype=np.int64).reshape(n, w)
