"""Training objectives for the wait-token model.

* masked softmax cross-entropy: ``<wait>`` steps contribute nothing,
* wait-token CTC: negative log of the total probability of every path that
  collapses to the reference, via a log-space forward recursion whose
  gradient comes from the tape,
* delay penalty: ``-sum log(1 - w_t)`` over steps that delay output,
* their weighted sum.

``ctc_bruteforce`` and ``path_mass_by_outcome`` enumerate paths explicitly and
serve as the independent oracle for the dynamic program.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import PAD, WAIT
from .tensor import Tensor

DELAY_FLOOR = 1e-7
BRUTEFORCE_LIMIT = 10**7


class CtcUnreachable(RuntimeWarning):
    """The reference cannot be produced by any path of the given length."""


def collapse(path: Sequence[int], wait_id: int = WAIT) -> list[int]:
    """Merge adjacent repeats, then drop ``wait_id``."""
    out = []
    prev = None
    for tok in path:
        if tok != prev and tok != wait_id:
            out.append(tok)
        prev = tok
    return out


def min_path_length(reference: Sequence[int]) -> int:
    """Shortest path that collapses to ``reference``: one extra step per adjacent repeat."""
    return len(reference) + sum(1 for a, b in zip(reference, reference[1:]) if a == b)


# --------------------------------------------------------------------------
# batched terms; inputs are time-major (T, B, V) log distributions


def sce_terms(log_probs: Tensor, tokens: np.ndarray, active: np.ndarray, wait_id: int = WAIT) -> Tensor:
    """Per-row ``-sum log p_t(token_t)`` over active steps whose token is not ``<wait>``."""
    picked = T.reshape(T.take_last(log_probs, np.asarray(tokens)[..., None]), tokens.shape)
    counted = np.asarray(active, dtype=bool) & (np.asarray(tokens) != wait_id)
    return -T.tsum(T.where(counted, picked, 0.0), axis=0)


def delay_terms(log_probs: Tensor, tokens: np.ndarray, active: np.ndarray, wait_id: int = WAIT) -> Tensor:
    """Per-row ``-sum log(1 - w_t)``.

    ``w_t`` is P(<wait>) where step t emitted <wait>, P(previous token) where
    step t repeated the previous emission, and 0 elsewhere.
    """
    tokens = np.asarray(tokens)
    active = np.asarray(active, dtype=bool)
    prev = np.concatenate([np.full((1,) + tokens.shape[1:], -1), tokens[:-1]], axis=0)
    is_wait = tokens == wait_id
    is_repeat = (tokens == prev) & ~is_wait
    delaying = active & (is_wait | is_repeat)
    idx = np.where(is_wait, wait_id, np.where(is_repeat, prev, PAD))
    w = T.exp(T.reshape(T.take_last(log_probs, idx[..., None]), tokens.shape))
    term = -T.log(T.clip_min(1.0 - w, DELAY_FLOOR))
    return T.tsum(T.where(delaying, term, 0.0), axis=0)


def _extended_labels(labels: np.ndarray, wait_id: int) -> np.ndarray:
    B, J = labels.shape
    ext = np.full((B, 2 * J + 1), wait_id, dtype=np.int64)
    ext[:, 1::2] = labels
    return ext


def ctc_terms(log_probs: Tensor, lengths, labels, label_lengths, wait_id: int = WAIT) -> Tensor:
    """Per-row CTC negative log-likelihood by the log-space forward recursion.

    ``log_probs`` is (T, B, V); row b uses steps ``0..lengths[b]-1`` and the
    first ``label_lengths[b]`` labels.  Rows with no valid path get ``+inf``.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    label_lengths = np.asarray(label_lengths, dtype=np.int64)
    Tmax, B, _ = log_probs.shape
    if labels.ndim != 2 or labels.shape[0] != B:
        raise T.ShapeError("ctc", log_probs.shape, labels.shape)
    if np.any(label_lengths < 1):
        raise ValueError("CTC needs at least one label per row")
    labels = np.where(np.arange(labels.shape[1])[None, :] < label_lengths[:, None], labels, wait_id)
    ext = _extended_labels(labels, wait_id)
    S = ext.shape[1]
    dtype = log_probs.data.dtype
    emit = T.take_last(log_probs, np.broadcast_to(ext, (Tmax, B, S)))

    init = np.full((B, S), -np.inf, dtype=dtype)
    init[:, :2] = 0.0
    same = np.zeros((B, S), dtype=bool)
    same[:, 2:] = ext[:, 2:] == ext[:, :-2]
    skip = np.where((ext != wait_id) & ~same, 0.0, -np.inf).astype(dtype)
    skip[:, :2] = -np.inf
    pad1 = T.constant(np.full((B, 1), -np.inf, dtype=dtype))
    pad2 = T.constant(np.full((B, 2), -np.inf, dtype=dtype))

    alpha = emit[0] + init
    for t in range(1, Tmax):
        stay = alpha
        step1 = T.concat([pad1, alpha[:, :-1]], axis=1)
        step2 = T.concat([pad2, alpha[:, :-2]], axis=1) + skip
        new = T.logsumexp(T.stack([stay, step1, step2], axis=-1), axis=-1) + emit[t]
        alpha = T.where((t < lengths)[:, None], new, alpha)
    ends = np.stack([2 * label_lengths, 2 * label_lengths - 1], axis=1)
    nll = -T.logsumexp(T.take_last(alpha, ends), axis=-1)
    if np.any(np.isinf(nll.data)):
        bad = np.flatnonzero(np.isinf(nll.data)).tolist()
        warnings.warn(f"CTC: no path of the given length reaches the reference for rows {bad}",
                      CtcUnreachable, stacklevel=2)
    return nll


def _as_log_probs(step_log_probs) -> Tensor:
    lp = step_log_probs if isinstance(step_log_probs, Tensor) else T.constant(step_log_probs)
    if lp.ndim != 2:
        raise T.ShapeError("ctc_loss", lp.shape)
    return lp


def ctc_loss(step_log_probs, reference: Sequence[int], wait_id: int = WAIT) -> Tensor:
    """CTC negative log-likelihood of ``reference`` given (T, V) step log-probabilities."""
    lp = _as_log_probs(step_log_probs)
    n = lp.shape[0]
    if len(reference) == 0:
        raise ValueError("CTC reference must be non-empty")
    if n < min_path_length(reference):
        warnings.warn(f"CTC: {n} steps cannot produce a reference of {len(reference)} labels",
                      CtcUnreachable, stacklevel=2)
        return T.constant(np.inf)
    batched = T.reshape(lp, (n, 1, lp.shape[1]))
    return T.reshape(ctc_terms(batched, [n], np.asarray(reference)[None, :], [len(reference)], wait_id), ())


def path_mass_by_outcome(step_probs: np.ndarray, wait_id: int = WAIT) -> dict[tuple[int, ...], float]:
    """Enumerate every length-T path and total its probability per collapsed outcome."""
    probs = np.asarray(step_probs, dtype=np.float64)
    n, V = probs.shape
    if V**n > BRUTEFORCE_LIMIT:
        raise ValueError(f"brute force over {V}^{n} paths exceeds the {BRUTEFORCE_LIMIT} limit")
    mass: dict[tuple[int, ...], float] = {}
    for path in itertools.product(range(V), repeat=n):
        p = 1.0
        for t, tok in enumerate(path):
            p *= probs[t, tok]
        key = tuple(collapse(path, wait_id))
        mass[key] = mass.get(key, 0.0) + p
    return mass


def ctc_bruteforce(step_probs: np.ndarray, reference: Sequence[int], wait_id: int = WAIT) -> float:
    """``-log`` of the summed probability of all paths collapsing to ``reference``."""
    total = path_mass_by_outcome(step_probs, wait_id).get(tuple(reference), 0.0)
    return math.inf if total == 0.0 else -math.log(total)


# --------------------------------------------------------------------------
# single-trace wrappers


def _trace_arrays(trace):
    if trace.log_probs is None:
        raise ValueError("trace carries no differentiable distributions")
    tokens = np.asarray(trace.emitted, dtype=np.int64)[:, None]
    lp = trace.log_probs
    return T.reshape(lp, (lp.shape[0], 1, lp.shape[1])), tokens, np.ones_like(tokens, dtype=bool)


def sce_masked(trace, reference: Sequence[int]) -> Tensor:
    """Cross-entropy of the reference over the trace's non-<wait> writes."""
    written = [t for t in trace.emitted if t != WAIT]
    if list(written) != list(reference):
        raise ValueError(f"trace writes {written} do not match the reference {list(reference)}")
    lp, tokens, active = _trace_arrays(trace)
    return T.reshape(sce_terms(lp, tokens, active), ())


def delay_penalty(trace) -> Tensor:
    lp, tokens, active = _trace_arrays(trace)
    return T.reshape(delay_terms(lp, tokens, active), ())


def combined_loss(ent, ctc, delay, alpha: float):
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return ent + ctc + alpha * delay


@dataclass
class LossBundle:
    ent: Tensor
    ctc: Tensor
    delay: Tensor
    alpha: float
    total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "ent": float(self.ent.data),
            "ctc": float(self.ctc.data),
            "del": float(self.delay.data),
            "total": float(self.total.data),
        }


def rollout_losses(rollout, alpha: float, use_ctc: bool = True) -> LossBundle:
    """Batch-mean loss terms for a teacher-forced rollout.

    Rows whose CTC lattice is unreachable drop their CTC term.
    """
    lengths = rollout.lengths
    B = len(lengths)
    ent = T.tsum(sce_terms(rollout.log_probs, rollout.tokens, rollout.active)) * (1.0 / B)
    zero = T.constant(0.0)
    if use_ctc:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CtcUnreachable)
            per_row = ctc_terms(rollout.log_probs, lengths, rollout.references, rollout.reference_lengths)
        finite = np.isfinite(per_row.data)
        ctc = T.tsum(T.where(finite, per_row, 0.0)) * (1.0 / B)
        delay = T.tsum(delay_terms(rollout.log_probs, rollout.tokens, rollout.active)) * (1.0 / B)
    else:
        ctc, delay = zero, zero
    total = combined_loss(ent, ctc, delay, alpha) if use_ctc else ent
    return LossBundle(ent, ctc, delay, alpha, total)
