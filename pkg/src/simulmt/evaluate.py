"""Greedy incremental decoding, token-level latency and corpus BLEU."""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import PAD
from .model import DecodeTrace, ModelParams, greedy_schedule, rollout_batch


def decode_corpus(params: ModelParams, sources: Sequence[Sequence[int]], mode: str, k: int | None = None,
                  max_len: int | None = None, batch_size: int = 64) -> list[DecodeTrace]:
    """Greedy decoding of every source; traces come back in input order.

    ``max_len`` caps the number of decoder write steps per sentence (WAIT
    writes included); by default ``2 * I + 2`` for the longest source.
    """
    for n, src in enumerate(sources, start=1):
        if len(src) == 0:
            raise ValueError(f"source line {n} is empty")
    if mode == "waitk" and (k is None or k < 1):
        raise ValueError("waitk decoding needs k >= 1")
    traces: list[DecodeTrace] = []
    with T.eval_mode(), T.no_grad():
        for start in range(0, len(sources), batch_size):
            chunk = sources[start : start + batch_size]
            lengths = np.array([len(s) for s in chunk], dtype=np.int64)
            src = np.full((len(chunk), lengths.max()), PAD, dtype=np.int64)
            for b, s in enumerate(chunk):
                src[b, : len(s)] = s
            steps = max_len if max_len is not None else int(2 * lengths.max() + 2)
            if mode == "adaptive":
                # waits consume steps too; leave room for all I - 1 of them
                ro = rollout_batch(params, src, lengths, max_steps=steps + int(lengths.max()), train=False)
            else:
                ro = greedy_schedule(params, src, lengths, mode, k, steps)
            traces.extend(ro.trace(b, keep_graph=False) for b in range(len(chunk)))
    return traces


@dataclass
class LatencyReport:
    delays: list[int]
    mean: float
    std: float


def latency(traces: Sequence[DecodeTrace]) -> LatencyReport:
    """First-output delay per sentence with its mean and population standard deviation."""
    if not traces:
        raise ValueError("latency needs at least one trace")
    delays = [t.first_output_delay() for t in traces]
    arr = np.asarray(delays, dtype=np.float64)
    return LatencyReport(delays, float(arr.mean()), float(arr.std()))


def _ngrams(tokens: Sequence, n: int) -> collections.Counter:
    return collections.Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_order: int = 4) -> float:
    """Corpus BLEU (0..100), uniform weights, brevity penalty, no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU needs a non-empty corpus")
    matches = [0] * max_order
    possible = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            possible[n - 1] += max(len(hyp) - n + 1, 0)
    if min(matches) == 0 or hyp_len == 0:
        return 0.0
    log_precision = sum(math.log(m / p) for m, p in zip(matches, possible)) / max_order
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_precision)


@dataclass
class MetricsReport:
    bleu: float
    latency: LatencyReport
    n_sentences: int

    def tsv(self) -> str:
        return f"{self.bleu:.2f}\t{self.latency.mean:.2f}\t{self.latency.std:.2f}\t{self.n_sentences}"


def score(traces: Sequence[DecodeTrace], references: Sequence[Sequence[int]]) -> MetricsReport:
    """BLEU over token ids (EOS/BOS/WAIT stripped) plus latency."""
    hyps = [t.output_tokens() for t in traces]
    refs = [[tok for tok in r if tok > 3] for r in references]
    return MetricsReport(bleu(hyps, refs), latency(traces), len(traces))
