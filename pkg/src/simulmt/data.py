"""Corpus ingestion, length filtering, byte-pair encoding, vocabularies and batching."""

from __future__ import annotations

import collections
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, BOS, EOS, WAIT = 0, 1, 2, 3
UNK = 4
PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, WAIT_TOKEN = "<pad>", "<s>", "</s>", "<wait>"
UNK_TOKEN = "<unk>"
# source vocabularies keep id 3 reserved so both sides share the special layout
RESERVED_TOKEN = "<reserved>"
CONTINUATION = "@@"


class CorpusError(ValueError):
    pass


# --------------------------------------------------------------------------
# corpus


@dataclass
class LoadReport:
    pairs: list[tuple[list[str], list[str]]]
    dropped: int
    total: int


def _read_lines(path: Path) -> list[str]:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    out = []
    for n, line in enumerate(lines, start=1):
        try:
            out.append(line.decode("utf-8").rstrip("\r"))
        except UnicodeDecodeError as exc:
            raise CorpusError(f"{path}: line {n} is not valid UTF-8 ({exc.reason})") from None
    return out


def keep_pair(src: Sequence[str], tgt: Sequence[str], max_len: int = 60, max_ratio: float = 9) -> bool:
    """Length filter: both sides non-empty, at most ``max_len`` tokens, ratio <= ``max_ratio`` either way."""
    a, b = len(src), len(tgt)
    if a == 0 or b == 0 or a > max_len or b > max_len:
        return False
    return max(a, b) / min(a, b) <= max_ratio


def filter_pairs(pairs, max_len: int = 60, max_ratio: float = 9) -> LoadReport:
    kept = [(s, t) for s, t in pairs if keep_pair(s, t, max_len, max_ratio)]
    return LoadReport(kept, len(pairs) - len(kept), len(pairs))


def load_parallel_corpus(src_path, tgt_path, max_len: int = 60, max_ratio: float = 9) -> LoadReport:
    """Read two aligned whitespace-tokenized files and drop over-long or unbalanced pairs."""
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(
            f"line count mismatch: {src_path} has {len(src_lines)}, {tgt_path} has {len(tgt_lines)}"
        )
    pairs = [(s.split(), t.split()) for s, t in zip(src_lines, tgt_lines)]
    report = filter_pairs(pairs, max_len, max_ratio)
    log.info("loaded %d pairs, dropped %d by length filters", len(report.pairs), report.dropped)
    return report


# --------------------------------------------------------------------------
# byte-pair encoding


@dataclass
class BpeModel:
    merges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("BPE merges must be distinct")
        self._rank = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[str, ...]] = {}

    def segment_word(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word)
        while len(symbols) > 1:
            ranked = [
                (self._rank[pair], i)
                for i, pair in enumerate(zip(symbols, symbols[1:]))
                if pair in self._rank
            ]
            if not ranked:
                break
            _, i = min(ranked)
            symbols[i : i + 2] = [symbols[i] + symbols[i + 1]]
        out = tuple(symbols)
        self._cache[word] = out
        return out

    def apply(self, sentence: str | Sequence[str]) -> list[str]:
        words = sentence.split() if isinstance(sentence, str) else sentence
        out: list[str] = []
        for word in words:
            pieces = self.segment_word(word)
            out.extend(p + CONTINUATION for p in pieces[:-1])
            out.append(pieces[-1])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        merges = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            parts = line.split(" ")
            if len(parts) != 2:
                raise CorpusError(f"{path}: line {n}: expected 'left right', got {line!r}")
            merges.append((parts[0], parts[1]))
        return cls(merges)


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out, i = [], 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def train_bpe(corpus_side: Iterable[str | Sequence[str]], merge_count: int) -> BpeModel:
    """Greedy BPE: repeatedly merge the most frequent adjacent symbol pair.

    Ties go to the lexicographically smallest pair so training is deterministic.
    """
    if merge_count < 0:
        raise ValueError("merge_count must be >= 0")
    words: collections.Counter[str] = collections.Counter()
    for sent in corpus_side:
        words.update(sent.split() if isinstance(sent, str) else sent)
    if not words:
        raise CorpusError("cannot train BPE on an empty corpus")
    vocab = {tuple(w): c for w, c in words.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(merge_count):
        stats: collections.Counter[tuple[str, str]] = collections.Counter()
        for symbols, count in vocab.items():
            for pair in zip(symbols, symbols[1:]):
                stats[pair] += count
        if not stats:
            break
        best_count = max(stats.values())
        best = min(p for p, c in stats.items() if c == best_count)
        merges.append(best)
        vocab = {_merge_word(s, best): c for s, c in vocab.items()}
    return BpeModel(merges)


def apply_bpe(model: BpeModel, sentence: str | Sequence[str]) -> list[str]:
    return model.apply(sentence)


def debpe(tokens: Sequence[str]) -> str:
    """Join subwords back into words by stripping continuation markers."""
    return " ".join(tokens).replace(CONTINUATION + " ", "").removesuffix(CONTINUATION)


# --------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Token/id bijection with the four reserved ids PAD, BOS, EOS, WAIT and an UNK fallback."""

    def __init__(self, tokens: Sequence[str]):
        if len(tokens) < 5 or tuple(tokens[:3]) != (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN):
            raise ValueError("vocabulary must start with <pad> <s> </s> <wait|reserved> <unk>")
        if tokens[3] not in (WAIT_TOKEN, RESERVED_TOKEN) or tokens[4] != UNK_TOKEN:
            raise ValueError("vocabulary must start with <pad> <s> </s> <wait|reserved> <unk>")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], size: int, target: bool = True) -> "Vocabulary":
        """Keep the ``size - 5`` most frequent tokens; equal counts ordered lexicographically."""
        if size < 5:
            raise ValueError(f"vocabulary size must cover the 4 reserved ids plus <unk>, got {size}")
        counts: collections.Counter[str] = collections.Counter()
        for sent in sentences:
            counts.update(sent)
        specials = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, WAIT_TOKEN if target else RESERVED_TOKEN, UNK_TOKEN]
        for s in specials:
            counts.pop(s, None)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(specials + [t for t, _ in ranked[: size - len(specials)]])

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def is_target(self) -> bool:
        return self.id_to_token[WAIT] == WAIT_TOKEN

    def encode(self, tokens: Sequence[str], add_eos: bool = False) -> list[int]:
        ids = [self.token_to_id.get(t, UNK) for t in tokens]
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_specials and i in (PAD, BOS, EOS, WAIT):
                continue
            out.append(self.id_to_token[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.id_to_token), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(tokenized_side: Iterable[Sequence[str]], size: int, target: bool = True) -> Vocabulary:
    return Vocabulary.build(tokenized_side, size, target=target)


# --------------------------------------------------------------------------
# pairs and batches


@dataclass(frozen=True)
class SentencePair:
    source_ids: tuple[int, ...]
    target_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.source_ids or not self.target_ids:
            raise ValueError("source and target must be non-empty")
        if PAD in self.source_ids or PAD in self.target_ids:
            raise ValueError("PAD may not appear inside a sentence")
        if self.target_ids[-1] != EOS:
            raise ValueError("target must end with EOS")


def encode_pairs(raw_pairs, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> list[SentencePair]:
    return [
        SentencePair(tuple(src_vocab.encode(s)), tuple(tgt_vocab.encode(t, add_eos=True)))
        for s, t in raw_pairs
    ]


@dataclass
class Batch:
    source: np.ndarray  # B x I_max, PAD beyond source_lengths
    target: np.ndarray  # B x J_max, PAD beyond target_lengths
    source_lengths: np.ndarray
    target_lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.source_lengths)

    @classmethod
    def from_pairs(cls, pairs: Sequence[SentencePair]) -> "Batch":
        src_len = np.array([len(p.source_ids) for p in pairs], dtype=np.int64)
        tgt_len = np.array([len(p.target_ids) for p in pairs], dtype=np.int64)
        src = np.full((len(pairs), src_len.max()), PAD, dtype=np.int64)
        tgt = np.full((len(pairs), tgt_len.max()), PAD, dtype=np.int64)
        for b, p in enumerate(pairs):
            src[b, : src_len[b]] = p.source_ids
            tgt[b, : tgt_len[b]] = p.target_ids
        return cls(src, tgt, src_len, tgt_len)


def make_batches(pairs: Sequence[SentencePair], batch_size: int = 64, seed: int = 0) -> list[Batch]:
    """Shuffle by ``seed``, bucket by source length, then shuffle the bucket order."""
    if not pairs:
        raise ValueError("make_batches needs at least one pair")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    order = sorted(order, key=lambda i: len(pairs[i].source_ids))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    batches = [Batch.from_pairs([pairs[i] for i in chunk]) for chunk in chunks]
    return [batches[i] for i in rng.permutation(len(batches))]
