"""Synthetic desk-scale corpora.

Token 0 is a separator, token 1 a query marker; ids from 2 up are data.
These tasks are made up for testing the adaptation machinery, not drawn
from any benchmark.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SEP = 0
QUERY = 1
FIRST_DATA = 2


@dataclass
class TaskDataset:
    """Context/target pairs; the loss is scored on targets only."""

    pairs: list[tuple[tuple[int, ...], tuple[int, ...]]]
    name: str = ""

    def __len__(self):
        return len(self.pairs)

    def check(self, vocab_size: int, max_len: int) -> None:
        for x, y in self.pairs:
            if any(not 0 <= t < vocab_size for t in x + y):
                raise ValueError(f"token outside vocabulary of size {vocab_size}")
            if len(x) + len(y) - 1 > max_len:
                raise ValueError(f"pair of length {len(x) + len(y)} exceeds usable length {max_len}")


def copy_corpus(n: int, vocab_size: int, length: int = 24, seed: int = 0) -> TaskDataset:
    """Pre-training text: random motifs repeated with occasional corruption."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        period = int(rng.integers(2, 7))
        motif = rng.integers(FIRST_DATA, vocab_size, size=period)
        seq = np.resize(motif, length)
        noise = rng.random(length) < 0.1
        seq[noise] = rng.integers(FIRST_DATA, vocab_size, size=int(noise.sum()))
        seq = [int(t) for t in seq]
        pairs.append((tuple(seq[:1]), tuple(seq[1:])))
    return TaskDataset(pairs, name="copy")


def reverse_task(n: int, vocab_size: int, length: int = 8, noise: float = 0.0,
                 seed: int = 0) -> TaskDataset:
    """x = random tokens + SEP, y = the tokens reversed.

    With ``noise > 0`` each target token is independently replaced by a
    uniformly drawn data token, which puts a floor under the achievable loss.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        s = rng.integers(FIRST_DATA, vocab_size, size=length)
        y = s[::-1].copy()
        flip = rng.random(length) < noise
        y[flip] = rng.integers(FIRST_DATA, vocab_size, size=int(flip.sum()))
        pairs.append((tuple(int(t) for t in s) + (SEP,), tuple(int(t) for t in y)))
    return TaskDataset(pairs, name="reverse")


def kv_task(n: int, vocab_size: int, n_pairs: int = 4, seed: int = 0) -> TaskDataset:
    """x = k1 v1 ... kn vn QUERY k_i, y = v_i."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        keys = rng.choice(np.arange(FIRST_DATA, vocab_size), size=n_pairs, replace=False)
        vals = rng.integers(FIRST_DATA, vocab_size, size=n_pairs)
        q = int(rng.integers(n_pairs))
        x = [int(t) for kv in zip(keys, vals) for t in kv] + [QUERY, int(keys[q])]
        pairs.append((tuple(x), (int(vals[q]),)))
    return TaskDataset(pairs, name="kv")


TASKS = {"copy": copy_corpus, "reverse": reverse_task, "kv": kv_task}


def make_task(name: str, n: int, vocab_size: int, seed: int = 0, **options) -> TaskDataset:
    try:
        fn = TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
    return fn(n, vocab_size, seed=seed, **options)
