import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simulmt import tensor as T
from simulmt.model import ModelConfig, ModelParams, read_checkpoint
from simulmt.synthetic import make_split
from simulmt.trainer import (
    LR_DECAY,
    Adam,
    TrainConfig,
    TrainState,
    clip_grad_norm,
    fit,
    schedule_step,
)


def tiny_config(**overrides):
    base = dict(embed_dim=8, hidden_dim=8, layers=1, dropout=0.1, learning_rate=3e-3, max_epochs=3,
                batch_size=16, seed=5)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_split():
    return make_split("copy", n_train=48, n_valid=16, n_test=8, seed=3)


class _Quadratic:
    """Stands in for ModelParams: one tensor, items() like the real container."""

    def __init__(self, x):
        self.x = T.tensor(x, requires_grad=True)

    def items(self):
        return [("x", self.x)]

    def __iter__(self):
        return iter([self.x])


def test_adam_decreases_a_quadratic_monotonically():
    p = _Quadratic(np.array([3.0, -2.0, 0.5]))
    opt = Adam(p, lr=0.05)
    losses = []
    for _ in range(100):
        p.x.grad = None
        loss = T.tsum(p.x * p.x)
        losses.append(float(loss.data))
        loss.backward()
        opt.step(p)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_clip_scales_norm_50_to_5():
    t = T.tensor(np.zeros(2), requires_grad=True)
    t.grad = np.array([30.0, 40.0], dtype=np.float32)
    before = clip_grad_norm([t], 5.0)
    assert before == pytest.approx(50.0)
    np.testing.assert_allclose(t.grad, [3.0, 4.0], rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=10), st.floats(0.1, 10.0))
def test_clipped_norm_never_exceeds_bound(values, bound):
    t = T.tensor(np.zeros(len(values)), requires_grad=True)
    t.grad = np.asarray(values, dtype=np.float32)
    clip_grad_norm([t], bound)
    assert float(np.linalg.norm(t.grad.astype(np.float64))) <= bound + 1e-6 * max(1.0, bound)


class TestSchedule:
    def _run(self, losses):
        state = TrainState(optimizer=None, lr=1.0)
        lrs = []
        for v in losses:
            schedule_step(state, v)
            lrs.append(state.lr)
        return lrs

    def test_decay_on_increase(self):
        assert self._run([2.0, 2.5]) == [1.0, pytest.approx(0.7071, abs=1e-4)]
        assert LR_DECAY == pytest.approx(1 / math.sqrt(2))

    def test_no_decay_when_decreasing(self):
        assert self._run([3.0, 2.0, 1.0]) == [1.0, 1.0, 1.0]

    def test_no_decay_on_ties(self):
        assert self._run([2.0, 2.0]) == [1.0, 1.0]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=12))
    def test_lr_nonincreasing(self, losses):
        lrs = self._run(losses)
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="beam")
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)


@pytest.mark.parametrize("mode", ["adaptive", "waitk", "full"])
def test_fit_is_deterministic(mode, tiny_split, tmp_path):
    cfg = tiny_config(mode=mode, k=2, alpha=0.05)
    a = fit(cfg, tiny_split.train, tiny_split.valid, tiny_split.src_vocab.size, tiny_split.tgt_vocab.size,
            run_dir=tmp_path / "a")
    b = fit(cfg, tiny_split.train, tiny_split.valid, tiny_split.src_vocab.size, tiny_split.tgt_vocab.size,
            run_dir=tmp_path / "b")
    assert a.state.history == b.state.history
    assert (tmp_path / "a" / "train_log.tsv").read_bytes() == (tmp_path / "b" / "train_log.tsv").read_bytes()
    for name, t in a.params.items():
        assert t.data.tobytes() == b.params[name].data.tobytes()


def test_best_checkpoint_has_minimum_validation_loss(tiny_split, tmp_path):
    cfg = tiny_config(max_epochs=4, learning_rate=2e-2)
    result = fit(cfg, tiny_split.train, tiny_split.valid, tiny_split.src_vocab.size, tiny_split.tgt_vocab.size,
                 run_dir=tmp_path)
    vals = [v for _, _, v, _ in result.state.history]
    ckpt = read_checkpoint(tmp_path / "best.ckpt")
    assert ckpt.val_loss == pytest.approx(min(vals))
    assert ckpt.epoch == 1 + int(np.argmin(vals))
    for name, t in result.params.items():
        np.testing.assert_array_equal(ckpt.arrays[name], t.data)
    lrs = [lr for *_, lr in result.state.history]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    rows = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert len(rows) == 4 and all(len(r.split("\t")) == 4 for r in rows)


def test_training_reduces_loss(tiny_split):
    cfg = tiny_config(mode="waitk", k=1, max_epochs=6, learning_rate=1e-2, dropout=0.0)
    history = fit(cfg, tiny_split.train, tiny_split.valid, tiny_split.src_vocab.size,
                  tiny_split.tgt_vocab.size).state.history
    assert history[-1][1] < history[0][1]


def test_model_config_carries_wait_bias():
    mc = TrainConfig(wait_bias=1.5).model_config(10, 12)
    assert isinstance(mc, ModelConfig) and mc.wait_bias == 1.5
    assert ModelParams.init(ModelConfig(10, 12, 4, 4, 1, wait_bias=1.5))["out_b"].data[3] == 1.5
