import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simulmt import tensor as T
from simulmt.data import BOS, EOS, WAIT, Batch, SentencePair
from simulmt.model import (
    DecoderState,
    ModelConfig,
    ModelParams,
    Schedule,
    attention_context,
    decode_step,
    encode_batch,
    encode_prefix,
    params_from_checkpoint,
    read_checkpoint,
    rollout_adaptive,
    rollout_batch,
    save_checkpoint,
    teacher_forced,
    waitk_g,
)

V = 12


def small_params(seed=0, wait_bias=0.0, dropout=0.0):
    return ModelParams.init(ModelConfig(V, V, embed_dim=8, hidden_dim=8, layers=2, dropout=dropout,
                                        wait_bias=wait_bias), seed=seed)


source_ids = st.lists(st.integers(5, V - 1), min_size=1, max_size=9)


class TestEncoder:
    @settings(max_examples=25, deadline=None)
    @given(source_ids, st.integers(0, 3))
    def test_prefix_matches_full_encoding(self, src, seed):
        params = small_params(seed)
        full = encode_batch(params, np.array([src])).matrix().data[0]
        for g in range(1, len(src) + 1):
            prefix = encode_prefix(params, src, g).matrix().data[0]
            np.testing.assert_array_equal(prefix, full[:g])

    def test_extending_a_prefix_equals_one_shot(self):
        params = small_params()
        src = [5, 6, 7, 8, 9]
        grown = encode_prefix(params, src, len(src), states=encode_prefix(params, src, 2))
        one_shot = encode_prefix(params, src, len(src))
        np.testing.assert_array_equal(grown.matrix().data, one_shot.matrix().data)

    def test_first_position_starts_from_zero_carries(self):
        params = small_params()
        states = encode_prefix(params, [5], 0 + 1)
        assert len(states) == 1
        fresh = encode_prefix(params, [5, 6], 1).matrix().data
        np.testing.assert_array_equal(states.matrix().data, fresh)

    def test_bad_prefix_length(self):
        with pytest.raises(ValueError):
            encode_prefix(small_params(), [5, 6], 3)


class TestAttention:
    def test_single_position(self):
        enc = T.tensor(np.array([[[0.3, -1.0], [5.0, 5.0]]]))
        ctx, w = attention_context(T.tensor([[2.0, 1.0]]), enc, 1)
        np.testing.assert_array_equal(w.data, [[1.0, 0.0]])
        np.testing.assert_allclose(ctx.data, [[0.3, -1.0]])

    def test_identical_states_give_uniform_weights(self):
        enc = T.tensor(np.ones((1, 4, 3)))
        _, w = attention_context(T.tensor([[0.5, 0.1, 2.0]]), enc, 4)
        np.testing.assert_allclose(w.data, [[0.25] * 4], rtol=1e-6)

    def test_hand_computed_two_positions(self, f64):
        enc = T.tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        _, w = attention_context(T.tensor([[1.0, 0.0]]), enc, 2)
        e = math.e
        np.testing.assert_allclose(w.data, [[e / (e + 1), 1 / (e + 1)]], rtol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 7), st.integers(0, 6), st.integers(0, 1000))
    def test_normalized_and_confined(self, n, g_off, seed):
        g = min(n, 1 + g_off)
        rng = np.random.default_rng(seed)
        _, w = attention_context(T.tensor(rng.normal(size=(2, 4))), T.tensor(rng.normal(size=(2, n, 4))), g)
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(w.data[:, g:] == 0.0)


class TestDecoderStep:
    def _step(self, params, g, wait_allowed):
        enc = encode_batch(params, np.array([[5, 6, 7]])).matrix()
        return decode_step(params, np.array([BOS]), DecoderState.initial(params, 1), enc, g, wait_allowed)

    def test_distribution_normalized(self):
        out = self._step(small_params(), 2, True)
        assert abs(float(np.exp(out.log_probs.data).sum()) - 1.0) < 1e-6

    def test_wait_probability_zero_at_source_end(self):
        out = self._step(small_params(wait_bias=50.0), 3, False)
        assert np.exp(out.log_probs.data[0, WAIT]) == 0.0

    def test_deterministic(self):
        params = small_params()
        with T.eval_mode():
            a = self._step(params, 2, True).log_probs.data
            b = self._step(params, 2, True).log_probs.data
        assert a.tobytes() == b.tobytes()


class TestWaitk:
    @pytest.mark.parametrize("j, k, I, g", [(1, 3, 10, 3), (9, 3, 10, 10), (1, 5, 4, 4), (2, 1, 10, 2)])
    def test_examples(self, j, k, I, g):
        assert waitk_g(j, k, I) == g

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 20), st.integers(1, 30))
    def test_schedule_is_valid(self, k, I, n):
        sched = Schedule.waitk(k, I, n)
        assert sched.is_valid(I)
        assert sched.g_table == sorted(sched.g_table)

    def test_invalid_schedules(self):
        assert not Schedule("adaptive", [1, 3]).is_valid(5)
        assert not Schedule("adaptive", [2, 1]).is_valid(5)
        assert not Schedule("adaptive", [1, 6]).is_valid(5)


def _g_sequence(trace):
    return [s.g for s in trace.writes]


class TestAdaptiveRollout:
    def test_forced_wait_policy(self):
        params = small_params(wait_bias=50.0)
        src, ref = [5, 6, 7, 8], [9, 10, EOS]
        trace = rollout_adaptive(params, src, ref)
        emitted = trace.emitted
        assert emitted == [WAIT] * (len(src) - 1) + ref
        assert trace.first_output_delay() == len(src) - 1
        assert trace.reads == len(src)

    def test_never_wait_policy(self):
        params = small_params(wait_bias=-50.0)
        trace = rollout_adaptive(params, [5, 6, 7, 8], [9, 10, EOS])
        assert WAIT not in trace.emitted
        assert set(_g_sequence(trace)) == {1}
        assert trace.first_output_delay() == 0

    @settings(max_examples=25, deadline=None)
    @given(source_ids, st.lists(st.integers(5, V - 1), min_size=0, max_size=6), st.integers(0, 5),
           st.floats(-3, 3))
    def test_traces_respect_schedule_invariants(self, src, ref, seed, bias):
        params = small_params(seed, wait_bias=bias)
        for trace in (rollout_adaptive(params, src, ref + [EOS]), rollout_adaptive(params, src, mode="free")):
            gs = _g_sequence(trace)
            assert Schedule("adaptive", gs).is_valid(len(src))
            assert trace.reads <= len(src)
            for s in trace.writes:
                if s.g == len(src):
                    assert s.token != WAIT
                    assert s.dist[WAIT] == 0.0

    def test_batched_rollout_matches_single_sentences(self):
        params = small_params(seed=3, wait_bias=0.5)
        pairs = [SentencePair((5, 6, 7), (8, 9, EOS)), SentencePair((5, 7, 9, 11, 6), (10, EOS))]
        batch = Batch.from_pairs(pairs)
        with T.eval_mode():
            ro = rollout_batch(params, batch.source, batch.source_lengths, batch.target, batch.target_lengths)
            for b, p in enumerate(pairs):
                single = rollout_adaptive(params, p.source_ids, p.target_ids)
                assert ro.trace(b).emitted == single.emitted
                assert _g_sequence(ro.trace(b)) == _g_sequence(single)

    def test_teacher_forced_waitk_never_waits(self):
        params = small_params(wait_bias=50.0)
        batch = Batch.from_pairs([SentencePair((5, 6, 7, 8), (9, 10, EOS))])
        ro = teacher_forced(params, batch, "waitk", 2)
        assert np.all(np.exp(ro.log_probs.data[:, :, WAIT]) == 0.0)
        assert list(ro.g[:, 0]) == [2, 3, 4]


def test_checkpoint_round_trip(tmp_path):
    params = small_params(seed=7)
    save_checkpoint(tmp_path / "m.ckpt", params, {"mode": "adaptive"}, 3, 1.25)
    ckpt = read_checkpoint(tmp_path / "m.ckpt")
    assert (ckpt.hyper, ckpt.epoch, ckpt.val_loss) == ({"mode": "adaptive"}, 3, 1.25)
    loaded = params_from_checkpoint(ckpt, params.config)
    for name, t in params.items():
        np.testing.assert_array_equal(loaded[name].data, t.data)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "x")
