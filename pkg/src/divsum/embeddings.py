"""Shared word-embedding table for query and document words."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import PAD, SPECIALS, Vocabulary
from .tensor import Graph, Tensor, parameter

INIT_RANGE = 0.1


@dataclass
class EmbeddingTable:
    matrix: Tensor
    trainable: bool = True

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def embed(self, g: Graph, ids: Sequence[int]) -> Tensor:
        """Rows of the table for ``ids`` as a ``len(ids) x d`` matrix."""
        n = len(self)
        for i in ids:
            if not 0 <= i < n:
                raise IndexError(f"token id {i} outside vocabulary of size {n}")
        return g.rows(self.matrix, ids)


def random_table(vocab_size: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    E = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(vocab_size, dim))
    E[PAD] = 0.0
    return E


def make_table(vocab_size: int, dim: int, rng: np.random.Generator, trainable: bool = True) -> EmbeddingTable:
    return EmbeddingTable(parameter(random_table(vocab_size, dim, rng), name="E"), trainable)


def load_pretrained(path, vocab: Vocabulary, dim: int, rng: np.random.Generator,
                    trainable: bool = True) -> tuple[EmbeddingTable, float]:
    """Initialise from a GloVe-format text file.

    Rows for tokens found in the file are copied; the rest keep a
    uniform(-0.1, 0.1) draw.  Returns the table and the matched fraction of
    the vocabulary (special tokens never match).
    """
    E = random_table(len(vocab), dim, rng)
    matched = set()
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts == [""]:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, found {len(values)}")
            idx = vocab.index.get(token)
            if idx is None or token in SPECIALS:
                continue
            E[idx] = np.array(values, dtype=np.float64)
            matched.add(idx)
    E[PAD] = 0.0
    return EmbeddingTable(parameter(E, name="E"), trainable), len(matched) / len(vocab)
