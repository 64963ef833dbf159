"""Toy parallel corpora with known reordering: copy (monotone) and reversal."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SentencePair, Vocabulary, encode_pairs


def token_names(vocab_size: int) -> list[str]:
    return [f"w{i}" for i in range(vocab_size)]


def make_task(task: str, n_pairs: int, vocab_size: int = 20, min_len: int = 5, max_len: int = 12,
              seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Random source sentences with target = source (``copy``) or reversed (``reverse``)."""
    if task not in ("copy", "reverse"):
        raise ValueError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    names = token_names(vocab_size)
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(min_len, max_len + 1))
        src = [names[i] for i in rng.integers(0, vocab_size, size=n)]
        tgt = list(src) if task == "copy" else src[::-1]
        pairs.append((src, tgt))
    return pairs


def task_vocabs(vocab_size: int = 20) -> tuple[Vocabulary, Vocabulary]:
    names = [token_names(vocab_size)]
    size = vocab_size + 5
    return Vocabulary.build(names, size, target=False), Vocabulary.build(names, size, target=True)


@dataclass
class Split:
    train: list[SentencePair]
    valid: list[SentencePair]
    test: list[SentencePair]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary


def make_split(task: str, n_train: int = 2000, n_valid: int = 200, n_test: int = 200, vocab_size: int = 20,
               seed: int = 0) -> Split:
    """Encoded train/valid/test pairs drawn from disjoint random streams."""
    src_vocab, tgt_vocab = task_vocabs(vocab_size)

    def part(n, offset):
        return encode_pairs(make_task(task, n, vocab_size, seed=seed + offset), src_vocab, tgt_vocab)

    return Split(part(n_train, 0), part(n_valid, 10_000), part(n_test, 20_000), src_vocab, tgt_vocab)


def write_corpus(pairs: list[tuple[list[str], list[str]]], src_path, tgt_path) -> None:
    Path(src_path).write_text("".join(" ".join(s) + "\n" for s, _ in pairs), encoding="utf-8")
    Path(tgt_path).write_text("".join(" ".join(t) + "\n" for _, t in pairs), encoding="utf-8")
