"""Adam training loop with global-norm clipping and validation-driven learning-rate decay."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch, SentencePair, make_batches
from .model import MODES, ModelConfig, ModelParams, rollout_batch, save_checkpoint, teacher_forced
from .objectives import LossBundle, rollout_losses

log = logging.getLogger(__name__)

LR_DECAY = 1.0 / math.sqrt(2.0)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "adaptive"
    k: int = 3
    alpha: float = 0.0
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    dropout: float = 0.3
    batch_size: int = 64
    embed_dim: int = 512
    hidden_dim: int = 512
    layers: int = 2
    # positive start-up offset on the <wait> logit so early adaptive rollouts read the source
    wait_bias: float = 3.0
    max_epochs: int = 10
    seed: int = 1234
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("learning_rate", "clip_norm", "batch_size", "embed_dim", "hidden_dim", "layers", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    def model_config(self, src_vocab_size: int, tgt_vocab_size: int) -> ModelConfig:
        return ModelConfig(src_vocab_size, tgt_vocab_size, self.embed_dim, self.hidden_dim, self.layers,
                           self.dropout, self.wait_bias)


# --------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: ModelParams, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.steps = 0

    def step(self, params: ModelParams) -> None:
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for name, t in params.items():
            if t.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * t.grad
            v *= b2
            v += (1.0 - b2) * t.grad * t.grad
            t.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(t.data.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; return the norm before."""
    tensors = list(params)
    norm = T.parameters_norm(tensors)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * np.asarray(scale, dtype=t.grad.dtype)
    return norm


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainState:
    optimizer: Adam
    epoch: int = 0
    lr: float = 1e-3
    prev_val: float | None = None
    best_val: float = math.inf
    best_epoch: int = 0
    best_path: Path | None = None
    history: list[tuple[int, float, float, float]] = field(default_factory=list)


def batch_loss(params: ModelParams, batch: Batch, config: TrainConfig) -> LossBundle:
    if config.mode == "adaptive":
        ro = rollout_batch(params, batch.source, batch.source_lengths, batch.target, batch.target_lengths)
        return rollout_losses(ro, config.alpha, use_ctc=True)
    ro = teacher_forced(params, batch, config.mode, config.k)
    return rollout_losses(ro, config.alpha, use_ctc=False)


def train_epoch(params: ModelParams, state: TrainState, batches: Sequence[Batch], config: TrainConfig) -> float:
    """One pass over ``batches``; returns the sentence-weighted mean training loss."""
    T.set_training(True)
    total, count = 0.0, 0
    for i, batch in enumerate(batches):
        params.zero_grad()
        losses = batch_loss(params, batch, config)
        value = float(losses.total.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at batch {i}: {losses.values()}")
        losses.total.backward()
        clip_grad_norm(params, config.clip_norm)
        state.optimizer.lr = state.lr
        state.optimizer.step(params)
        total += value * len(batch)
        count += len(batch)
    params.zero_grad()
    return total / count


def evaluate_loss(params: ModelParams, batches: Sequence[Batch], config: TrainConfig) -> float:
    total, count = 0.0, 0
    with T.eval_mode(), T.no_grad():
        for batch in batches:
            total += float(batch_loss(params, batch, config).total.data) * len(batch)
            count += len(batch)
    return total / count


def validate_and_schedule(params: ModelParams, state: TrainState, val_batches: Sequence[Batch],
                          config: TrainConfig, checkpoint_path=None, hyper: dict | None = None) -> float:
    """Compute validation loss, decay the learning rate if it rose, checkpoint if best."""
    if not val_batches:
        raise ValueError("validation set is empty")
    val = evaluate_loss(params, val_batches, config)
    schedule_step(state, val)
    if val < state.best_val:
        state.best_val = val
        state.best_epoch = state.epoch
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params, hyper or {}, state.epoch, val)
            state.best_path = Path(checkpoint_path)
    return val


def schedule_step(state: TrainState, val: float) -> None:
    """Multiply the learning rate by 1/sqrt(2) when ``val`` exceeds the previous epoch's value."""
    if state.prev_val is not None and val > state.prev_val:
        state.lr *= LR_DECAY
    state.prev_val = val


def config_hyper(config: TrainConfig, src_vocab_size: int, tgt_vocab_size: int) -> dict:
    hyper = dataclasses.asdict(config)
    hyper["src_vocab_size"] = src_vocab_size
    hyper["tgt_vocab_size"] = tgt_vocab_size
    return hyper


@dataclass
class FitResult:
    params: ModelParams
    state: TrainState
    model_config: ModelConfig


def fit(config: TrainConfig, train_pairs: Sequence[SentencePair], valid_pairs: Sequence[SentencePair],
        src_vocab_size: int, tgt_vocab_size: int, run_dir=None) -> FitResult:
    """Train for ``config.max_epochs`` epochs and return the parameters with the lowest validation loss.

    With ``run_dir`` set, writes ``train_log.tsv`` (epoch, train loss, val loss,
    learning rate), ``timing.tsv`` (epoch, wall-clock seconds) and ``best.ckpt``.
    """
    model_config = config.model_config(src_vocab_size, tgt_vocab_size)
    params = ModelParams.init(model_config, seed=config.seed)
    T.seed_dropout(config.seed)
    state = TrainState(Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps),
                       lr=config.learning_rate)
    hyper = config_hyper(config, src_vocab_size, tgt_vocab_size)
    val_batches = make_batches(valid_pairs, config.batch_size, seed=config.seed)
    best = params.copy()
    log_path = timing_path = ckpt_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path, timing_path, ckpt_path = run_dir / "train_log.tsv", run_dir / "timing.tsv", run_dir / "best.ckpt"
        log_path.write_text("")
        timing_path.write_text("")
    start = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        batches = make_batches(train_pairs, config.batch_size, seed=config.seed + epoch)
        lr_used = state.lr
        train_loss = train_epoch(params, state, batches, config)
        val = validate_and_schedule(params, state, val_batches, config, ckpt_path, hyper)
        if state.best_epoch == epoch:
            best = params.copy()
        state.history.append((epoch, train_loss, val, lr_used))
        log.info("epoch %d train %.4f val %.4f lr %.3g", epoch, train_loss, val, lr_used)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(f"{epoch}\t{train_loss:.6f}\t{val:.6f}\t{lr_used:.6g}\n")
            with timing_path.open("a") as fh:
                fh.write(f"{epoch}\t{time.perf_counter() - start:.3f}\n")
    return FitResult(best, state, model_config)
