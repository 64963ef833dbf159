"""Forward-only LSTM encoder, input-feeding dot-attention decoder and read/write policies.

Modes
-----
``full``      read the whole source, then write (conventional NMT).
``waitk``     fixed schedule ``g(j) = min(k + j - 1, I)``.
``adaptive``  the decoder emits ``<wait>`` to read one more source token.

Because the encoder recurrence is strictly left-to-right, the state at source
position ``i`` depends only on tokens ``1..i``.  Batched code therefore encodes
each source once and restricts attention to the first ``g`` positions, which is
equivalent to incremental encoding (see :func:`encode_prefix`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, WAIT, Batch
from .tensor import Tensor

MODES = ("full", "waitk", "adaptive")
CHECKPOINT_MAGIC = "simulmt-checkpoint 1"


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    embed_dim: int = 512
    hidden_dim: int = 512
    layers: int = 2
    dropout: float = 0.3
    # initial logit offset of <wait>; positive values start the policy out reading
    wait_bias: float = 0.0
    init_scale: float = 0.1


class ModelParams:
    """Named trainable tensors (the model's theta) in a fixed order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        E, H, L = config.embed_dim, config.hidden_dim, config.layers
        shapes: dict[str, tuple[int, ...]] = {
            "src_emb": (config.src_vocab_size, E),
            "tgt_emb": (config.tgt_vocab_size, E),
        }
        for layer in range(L):
            shapes[f"enc{layer}_w"] = ((E if layer == 0 else H) + H, 4 * H)
            shapes[f"enc{layer}_b"] = (4 * H,)
        for layer in range(L):
            # layer 0 input is [embedding; previous attentional vector] (input feeding)
            shapes[f"dec{layer}_w"] = ((E + H if layer == 0 else H) + H, 4 * H)
            shapes[f"dec{layer}_b"] = (4 * H,)
        shapes["W_c"] = (2 * H, H)
        shapes["W_s"] = (H, config.tgt_vocab_size)
        shapes["out_b"] = (config.tgt_vocab_size,)
        dtype = T.get_dtype()
        tensors = {}
        for name, shape in shapes.items():
            if name.endswith("_b"):
                value = np.zeros(shape)
            else:
                value = rng.uniform(-config.init_scale, config.init_scale, size=shape)
            tensors[name] = Tensor(value.astype(dtype), requires_grad=True)
        tensors["out_b"].data[WAIT] = config.wait_bias
        for name in ("src_emb", "tgt_emb"):
            tensors[name].data[PAD] = 0.0
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()}
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.tensors.items()}
        )


# --------------------------------------------------------------------------
# recurrent pieces


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    H = h.shape[-1]
    gates = T.concat([x, h], axis=-1) @ w + b
    i = T.sigmoid(gates[:, :H])
    f = T.sigmoid(gates[:, H : 2 * H])
    g = T.tanh(gates[:, 2 * H : 3 * H])
    o = T.sigmoid(gates[:, 3 * H :])
    c_new = f * c + i * g
    return o * T.tanh(c_new), c_new


def _zeros(batch: int, dim: int) -> Tensor:
    return T.constant(np.zeros((batch, dim)))


@dataclass
class EncoderStates:
    """Top-layer forward hidden vectors for positions 1..g plus per-layer carries."""

    hidden: list[Tensor]  # each (B, H)
    carries: list[tuple[Tensor, Tensor]]  # (h, c) per layer after the last position

    def __len__(self) -> int:
        return len(self.hidden)

    def matrix(self) -> Tensor:
        """(B, g, H) stack of the hidden vectors."""
        return T.stack(self.hidden, axis=1)


def _encoder_steps(params: ModelParams, ids: np.ndarray, states: EncoderStates) -> EncoderStates:
    """Advance the encoder over ``ids`` (B, n), extending ``states`` in place."""
    cfg = params.config
    emb = T.dropout(T.embedding(params["src_emb"], ids), cfg.dropout)
    carries = list(states.carries)
    for pos in range(ids.shape[1]):
        x = emb[:, pos]
        for layer in range(cfg.layers):
            h, c = lstm_cell(x, *carries[layer], params[f"enc{layer}_w"], params[f"enc{layer}_b"])
            carries[layer] = (h, c)
            x = T.dropout(h, cfg.dropout) if layer + 1 < cfg.layers else h
        states.hidden.append(x)
    states.carries = carries
    return states


def encode_batch(params: ModelParams, source: np.ndarray) -> EncoderStates:
    source = np.asarray(source, dtype=np.int64)
    B, H = source.shape[0], params.config.hidden_dim
    empty = EncoderStates([], [(_zeros(B, H), _zeros(B, H)) for _ in range(params.config.layers)])
    return _encoder_steps(params, source, empty)


def encode_prefix(params: ModelParams, source_ids: Sequence[int], upto: int,
                  states: EncoderStates | None = None) -> EncoderStates:
    """Encode the first ``upto`` source tokens of one sentence.

    Passing the ``states`` of a shorter prefix continues from its carries and
    leaves the already-encoded positions untouched.
    """
    n = len(source_ids)
    if not 1 <= upto <= n:
        raise ValueError(f"prefix length {upto} outside 1..{n}")
    if states is None:
        H = params.config.hidden_dim
        states = EncoderStates([], [(_zeros(1, H), _zeros(1, H)) for _ in range(params.config.layers)])
    else:
        states = EncoderStates(list(states.hidden), list(states.carries))
    done = len(states)
    if done > upto:
        raise ValueError(f"states already cover {done} positions, asked for {upto}")
    ids = np.asarray(source_ids[done:upto], dtype=np.int64)[None, :]
    return _encoder_steps(params, ids, states)


# --------------------------------------------------------------------------
# attention and decoder


def _position_mask(g: np.ndarray, n_positions: int, dtype) -> np.ndarray:
    """Additive mask: 0 for positions < g, -inf beyond."""
    allowed = np.arange(n_positions)[None, :] < np.asarray(g)[:, None]
    return np.where(allowed, 0.0, -np.inf).astype(dtype)


def attention_context(d: Tensor, enc: Tensor, g) -> tuple[Tensor, Tensor]:
    """Dot attention of decoder state ``d`` (B, H) over the first ``g`` rows of ``enc`` (B, I, H).

    Returns the context vectors (B, H) and the attention weights (B, I);
    weights beyond ``g`` are exactly zero.
    """
    B, n, H = enc.shape
    g = np.broadcast_to(np.asarray(g, dtype=np.int64), (B,))
    if np.any(g < 1):
        raise ValueError("attention needs at least one encoded position")
    scores = T.reshape(enc @ T.reshape(d, (B, H, 1)), (B, n))
    weights = T.softmax(scores + _position_mask(g, n, scores.data.dtype))
    context = T.reshape(T.reshape(weights, (B, 1, n)) @ enc, (B, H))
    return context, weights


@dataclass
class DecoderState:
    layers: list[tuple[Tensor, Tensor]]
    feed: Tensor  # previous attentional vector b~ (input feeding)

    @classmethod
    def initial(cls, params: ModelParams, batch: int) -> "DecoderState":
        H = params.config.hidden_dim
        return cls([(_zeros(batch, H), _zeros(batch, H)) for _ in range(params.config.layers)], _zeros(batch, H))


@dataclass
class StepOutput:
    log_probs: Tensor  # (B, V) log distribution over target vocab incl. <wait>
    state: DecoderState
    attention: Tensor  # (B, I)


def decode_step(params: ModelParams, prev_tokens, state: DecoderState, enc: Tensor, g,
                wait_allowed) -> StepOutput:
    """One decoder step for a batch.

    ``wait_allowed`` (bool per row) keeps the ``<wait>`` logit; rows where it is
    False get ``P(<wait>) = 0`` exactly.
    """
    cfg = params.config
    prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
    B = prev_tokens.shape[0]
    emb = T.dropout(T.embedding(params["tgt_emb"], prev_tokens), cfg.dropout)
    x = T.concat([emb, state.feed], axis=-1)
    new_layers = []
    for layer in range(cfg.layers):
        h, c = lstm_cell(x, *state.layers[layer], params[f"dec{layer}_w"], params[f"dec{layer}_b"])
        new_layers.append((h, c))
        x = T.dropout(h, cfg.dropout) if layer + 1 < cfg.layers else h
    d = x
    context, weights = attention_context(d, enc, g)
    feed = T.tanh(T.concat([context, d], axis=-1) @ params["W_c"])
    logits = T.dropout(feed, cfg.dropout) @ params["W_s"] + params["out_b"]
    wait_mask = np.zeros((B, logits.shape[1]), dtype=logits.data.dtype)
    wait_mask[~np.broadcast_to(np.asarray(wait_allowed, dtype=bool), (B,)), WAIT] = -np.inf
    log_probs = T.log_softmax(logits + wait_mask)
    return StepOutput(log_probs, DecoderState(new_layers, feed), weights)


# --------------------------------------------------------------------------
# schedules


def waitk_g(j: int, k: int, source_length: int) -> int:
    """Source tokens read before writing output ``j`` (1-based) under Wait-k."""
    if j < 1 or k < 1 or source_length < 1:
        raise ValueError("waitk_g needs j, k, I >= 1")
    return min(k + j - 1, source_length)


@dataclass
class Schedule:
    mode: str
    g_table: list[int]
    k: int | None = None

    def __post_init__(self):
        if self.mode not in ("fixed-k", "adaptive", "full"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")

    def is_valid(self, source_length: int) -> bool:
        g = self.g_table
        if not g:
            return True
        if g[0] < 1 or g[-1] > source_length:
            return False
        return all(b - a in (0, 1) for a, b in zip(g, g[1:]))

    @classmethod
    def waitk(cls, k: int, source_length: int, n_steps: int) -> "Schedule":
        return cls("fixed-k", [waitk_g(j, k, source_length) for j in range(1, n_steps + 1)], k)


def schedule_g(mode: str, k: int | None, step: int, source_lengths: np.ndarray) -> np.ndarray:
    """Per-row g for fixed schedules at 1-based output ``step``."""
    if mode == "full":
        return source_lengths.copy()
    if mode == "waitk":
        return np.minimum(k + step - 1, source_lengths)
    raise ValueError(f"mode {mode!r} has no fixed schedule")


# --------------------------------------------------------------------------
# traces


@dataclass
class Step:
    action: str  # "R" or "W"
    g: int
    token: int | None = None
    dist: np.ndarray | None = None


@dataclass
class DecodeTrace:
    """Ordered READ/WRITE actions for one sentence.

    ``log_probs`` holds the differentiable per-WRITE log distributions when the
    trace came from a training rollout, one row per WRITE in order.
    """

    steps: list[Step]
    source_length: int
    mode: str
    log_probs: Tensor | None = None

    @property
    def writes(self) -> list[Step]:
        return [s for s in self.steps if s.action == "W"]

    @property
    def emitted(self) -> list[int]:
        return [s.token for s in self.steps if s.action == "W"]

    @property
    def reads(self) -> int:
        return sum(1 for s in self.steps if s.action == "R")

    def output_tokens(self) -> list[int]:
        """Emitted tokens without <wait>, stopping at (and dropping) EOS."""
        out = []
        for tok in self.emitted:
            if tok == EOS:
                break
            if tok != WAIT:
                out.append(tok)
        return out

    def first_output_delay(self) -> int:
        """Delaying actions before the first real token.

        Adaptive traces count ``<wait>`` emissions; schedule-driven traces
        (full, waitk) count source reads.
        """
        count = 0
        for s in self.steps:
            if self.mode == "adaptive":
                if s.action == "W":
                    if s.token != WAIT:
                        return count
                    count += 1
            else:
                if s.action == "W":
                    return count
                count += 1
        return count

    def format(self, vocab=None) -> str:
        parts = []
        for s in self.steps:
            if s.action == "R":
                parts.append("R")
            else:
                name = str(s.token) if vocab is None else vocab.id_to_token[s.token]
                parts.append(f"W:{name}")
        return " ".join(parts)


@dataclass
class Rollout:
    """Batched record of decoder write steps (time-major)."""

    log_probs: Tensor  # (T, B, V)
    tokens: np.ndarray  # (T, B) emitted ids, PAD where inactive
    g: np.ndarray  # (T, B) source tokens read at each write
    active: np.ndarray  # (T, B)
    source_lengths: np.ndarray
    mode: str
    references: np.ndarray | None = None  # (B, J) when teacher forced
    reference_lengths: np.ndarray | None = None

    @property
    def lengths(self) -> np.ndarray:
        return self.active.sum(axis=0)

    def trace(self, b: int, keep_graph: bool = True) -> DecodeTrace:
        n = int(self.lengths[b])
        I = int(self.source_lengths[b])
        lp = self.log_probs.data
        steps: list[Step] = []
        read = 0
        for t in range(n):
            g = int(self.g[t, b])
            while read < g:
                read += 1
                steps.append(Step("R", read))
            tok = int(self.tokens[t, b])
            steps.append(Step("W", g, tok, np.exp(lp[t, b])))
            if self.mode == "adaptive" and tok == WAIT:
                read += 1
                steps.append(Step("R", read))
        rows = self.log_probs[:n, b] if keep_graph else None
        return DecodeTrace(steps, I, self.mode, rows)


def teacher_forced(params: ModelParams, batch: Batch, mode: str, k: int | None = None) -> Rollout:
    """Run the decoder on the reference under a fixed schedule (full or waitk)."""
    enc = encode_batch(params, batch.source).matrix()
    B, J = batch.target.shape
    inputs = np.concatenate([np.full((B, 1), BOS), batch.target[:, :-1]], axis=1)
    state = DecoderState.initial(params, B)
    no_wait = np.zeros(B, dtype=bool)
    steps, gs = [], []
    for j in range(J):
        g = schedule_g(mode, k, j + 1, batch.source_lengths)
        out = decode_step(params, inputs[:, j], state, enc, g, no_wait)
        state = out.state
        steps.append(out.log_probs)
        gs.append(g)
    active = np.arange(J)[:, None] < batch.target_lengths[None, :]
    return Rollout(
        T.stack(steps, axis=0),
        np.where(active, batch.target.T, PAD),
        np.stack(gs),
        active,
        batch.source_lengths,
        mode,
        batch.target,
        batch.target_lengths,
    )


def rollout_batch(params: ModelParams, source: np.ndarray, source_lengths: np.ndarray,
                  references: np.ndarray | None = None, reference_lengths: np.ndarray | None = None,
                  max_steps: int | None = None, train: bool = True) -> Rollout:
    """Adaptive read/write rollout over a batch.

    Every row starts having read one source token.  At each step the greedy
    choice decides: ``<wait>`` (when ``g < I``) records a WAIT write and reads
    one token; otherwise train mode writes the next reference token (teacher
    forcing) and free mode writes the argmax.  Train mode ends a row once its
    reference is consumed, free mode once EOS is written or ``max_steps`` is hit.
    """
    source = np.asarray(source, dtype=np.int64)
    source_lengths = np.asarray(source_lengths, dtype=np.int64)
    B = source.shape[0]
    if train:
        if references is None or reference_lengths is None:
            raise ValueError("train-mode rollout needs references")
        references = np.asarray(references, dtype=np.int64)
        reference_lengths = np.asarray(reference_lengths, dtype=np.int64)
        bound = int((source_lengths + reference_lengths).max()) + 1
        max_steps = bound if max_steps is None else max_steps
    elif max_steps is None:
        raise ValueError("free-mode rollout needs max_steps")

    enc = encode_batch(params, source).matrix()
    state = DecoderState.initial(params, B)
    g = np.ones(B, dtype=np.int64)
    ptr = np.zeros(B, dtype=np.int64)
    prev = np.full(B, BOS, dtype=np.int64)
    active = np.ones(B, dtype=bool) if not train else reference_lengths > 0
    steps, toks, gs, acts = [], [], [], []
    t = 0
    while active.any():
        if t >= max_steps:
            if train:
                raise RuntimeError(f"train rollout exceeded {max_steps} steps")
            break
        out = decode_step(params, prev, state, enc, g, g < source_lengths)
        state = out.state
        choice = out.log_probs.data.argmax(axis=-1)
        waits = active & (choice == WAIT) & (g < source_lengths)
        if train:
            ref_tok = references[np.arange(B), np.minimum(ptr, references.shape[1] - 1)]
            tok = np.where(waits, WAIT, ref_tok)
        else:
            tok = choice
        tok = np.where(active, tok, PAD)
        steps.append(out.log_probs)
        toks.append(tok)
        gs.append(g.copy())
        acts.append(active.copy())
        g = g + waits
        writes = active & ~waits
        ptr = ptr + writes
        prev = np.where(active, tok, prev)
        if train:
            active = active & (ptr < reference_lengths)
        else:
            active = active & ~(writes & (tok == EOS))
        t += 1
    if not steps:
        raise ValueError("rollout produced no steps")
    return Rollout(
        T.stack(steps, axis=0),
        np.stack(toks),
        np.stack(gs),
        np.stack(acts),
        source_lengths,
        "adaptive",
        references,
        reference_lengths,
    )


def rollout_adaptive(params: ModelParams, source_ids: Sequence[int], reference_ids: Sequence[int] | None = None,
                     mode: str = "train", max_T: int | None = None) -> DecodeTrace:
    """Single-sentence adaptive rollout (see :func:`rollout_batch`)."""
    if mode not in ("train", "free"):
        raise ValueError("mode must be 'train' or 'free'")
    I = len(source_ids)
    src = np.asarray(source_ids, dtype=np.int64)[None, :]
    if mode == "train":
        if reference_ids is None:
            raise ValueError("train mode needs a reference")
        J = len(reference_ids)
        max_T = I + J + 1 if max_T is None else max_T
        if max_T < I + J - 1:
            raise ValueError(f"max_T={max_T} cannot fit {I - 1} waits and {J} writes")
        ro = rollout_batch(params, src, np.array([I]), np.asarray(reference_ids)[None, :], np.array([J]),
                           max_steps=max_T, train=True)
    else:
        max_T = I + 2 * (len(reference_ids) if reference_ids is not None else I) if max_T is None else max_T
        ro = rollout_batch(params, src, np.array([I]), max_steps=max_T, train=False)
    return ro.trace(0)


def greedy_schedule(params: ModelParams, source: np.ndarray, source_lengths: np.ndarray, mode: str,
                    k: int | None, max_steps: int) -> Rollout:
    """Free greedy decoding under a fixed schedule (full or waitk)."""
    source = np.asarray(source, dtype=np.int64)
    source_lengths = np.asarray(source_lengths, dtype=np.int64)
    B = source.shape[0]
    enc = encode_batch(params, source).matrix()
    state = DecoderState.initial(params, B)
    prev = np.full(B, BOS, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    no_wait = np.zeros(B, dtype=bool)
    steps, toks, gs, acts = [], [], [], []
    for j in range(1, max_steps + 1):
        if not active.any():
            break
        g = schedule_g(mode, k, j, source_lengths)
        out = decode_step(params, prev, state, enc, g, no_wait)
        state = out.state
        tok = np.where(active, out.log_probs.data.argmax(axis=-1), PAD)
        steps.append(out.log_probs)
        toks.append(tok)
        gs.append(g)
        acts.append(active.copy())
        prev = np.where(active, tok, prev)
        active = active & (tok != EOS)
    return Rollout(T.stack(steps, axis=0), np.stack(toks), np.stack(gs), np.stack(acts), source_lengths, mode)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, hyper: dict, epoch: int, val_loss: float) -> None:
    """Text manifest, an ``end`` line, then every parameter as little-endian float32."""
    lines = [CHECKPOINT_MAGIC]
    lines += [f"hyper {k}={v}" for k, v in hyper.items()]
    lines.append(f"epoch {epoch}")
    lines.append(f"val_loss {val_loss!r}")
    for name, t in params.items():
        lines.append(f"param {name} {' '.join(str(n) for n in t.shape)}")
    lines.append("end")
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for _, t in params.items())
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8") + payload)


@dataclass
class Checkpoint:
    hyper: dict[str, str]
    epoch: int
    val_loss: float
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0 or not raw.startswith(CHECKPOINT_MAGIC.encode()):
        raise ValueError(f"{path}: not a checkpoint file")
    header = raw[:cut].decode("utf-8").splitlines()[1:]
    payload = memoryview(raw)[cut + len(marker):]
    hyper, epoch, val_loss, shapes = {}, 0, math.inf, []
    for line in header:
        kind, _, rest = line.partition(" ")
        if kind == "hyper":
            key, _, value = rest.partition("=")
            hyper[key] = value
        elif kind == "epoch":
            epoch = int(rest)
        elif kind == "val_loss":
            val_loss = float(rest)
        elif kind == "param":
            name, *dims = rest.split()
            shapes.append((name, tuple(int(d) for d in dims)))
    arrays, offset = {}, 0
    for name, shape in shapes:
        n = int(np.prod(shape)) * 4
        arrays[name] = np.frombuffer(payload[offset : offset + n], dtype="<f4").reshape(shape).copy()
        offset += n
    if offset != len(payload):
        raise ValueError(f"{path}: payload size {len(payload)} does not match manifest ({offset})")
    return Checkpoint(hyper, epoch, val_loss, arrays)


def params_from_checkpoint(ckpt: Checkpoint, config: ModelConfig) -> ModelParams:
    params = ModelParams.init(config)
    for name, t in params.items():
        arr = ckpt.arrays[name]
        if arr.shape != t.shape:
            raise ValueError(f"checkpoint {name} has shape {arr.shape}, model expects {t.shape}")
        t.data = arr.astype(T.get_dtype())
    return params
