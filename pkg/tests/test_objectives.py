import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simulmt import tensor as T
from simulmt.data import EOS, WAIT
from simulmt.model import DecodeTrace, Step
from simulmt.objectives import (
    CtcUnreachable,
    collapse,
    combined_loss,
    ctc_bruteforce,
    ctc_loss,
    ctc_terms,
    delay_penalty,
    min_path_length,
    path_mass_by_outcome,
    sce_masked,
)
from simulmt.oracle import ORACLE_WAIT, Instance, gradient_error, random_instance

A, B_ = 5, 6  # two ordinary target ids


def random_probs(rng, n, V):
    p = rng.random((n, V)) + 0.05
    return p / p.sum(axis=1, keepdims=True)


def trace_from(tokens, probs):
    """A DecodeTrace whose i-th write emitted ``tokens[i]`` with distribution ``probs[i]``."""
    steps = [Step("W", 1, t, p) for t, p in zip(tokens, probs)]
    return DecodeTrace(steps, 1, "adaptive", T.tensor(np.log(probs)))


class TestCollapse:
    @pytest.mark.parametrize(
        "path, out",
        [([WAIT, A, A, WAIT, B_], [A, B_]), ([A, WAIT, A], [A, A]), ([], []), ([WAIT, WAIT], [])],
    )
    def test_examples(self, path, out):
        assert collapse(path) == out

    def test_min_path_length(self):
        assert min_path_length([A, A, B_]) == 4
        assert min_path_length([A, B_]) == 2


class TestCtcExamples:
    def test_single_step(self, f64):
        p = np.array([[0.3, 0.6, 0.1]])  # columns: wait, a, b
        loss = ctc_loss(np.log(p), [1], wait_id=0)
        assert abs(float(loss.data) + math.log(0.6)) < 1e-12

    def test_two_steps_three_paths(self, f64, rng):
        p = random_probs(rng, 2, 3)
        want = -math.log(p[0, 1] * p[1, 1] + p[0, 1] * p[1, 0] + p[0, 0] * p[1, 1])
        assert abs(float(ctc_loss(np.log(p), [1], wait_id=0).data) - want) < 1e-12
        assert abs(ctc_bruteforce(p, [1], wait_id=0) - want) < 1e-12

    def test_unreachable_is_infinite(self, f64):
        p = np.full((2, 3), 1 / 3)
        with pytest.warns(CtcUnreachable):
            assert float(ctc_loss(np.log(p), [1, 2, 1], wait_id=0).data) == math.inf
        with pytest.warns(CtcUnreachable):
            assert float(ctc_loss(np.log(p), [1, 1], wait_id=0).data) == math.inf
        assert ctc_bruteforce(p, [1, 2, 1], wait_id=0) == math.inf

    def test_repeat_needs_separating_wait(self, f64, rng):
        p = random_probs(rng, 3, 3)
        want = -math.log(p[0, 1] * p[1, 0] * p[2, 1])
        assert abs(float(ctc_loss(np.log(p), [1, 1], wait_id=0).data) - want) < 1e-12


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dp_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng)
    with T.precision(64), warnings.catch_warnings():
        warnings.simplefilter("ignore", CtcUnreachable)
        dp = float(ctc_loss(np.log(inst.probs), inst.reference, ORACLE_WAIT).data)
    bf = ctc_bruteforce(inst.probs, inst.reference, ORACLE_WAIT)
    if math.isinf(bf):
        assert dp == math.inf
    else:
        assert abs(dp - bf) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng)
    with T.precision(64):
        err = gradient_error(inst)
    assert err is None or err < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_total_path_mass_is_one(seed):
    inst = random_instance(np.random.default_rng(seed))
    assert abs(sum(path_mass_by_outcome(inst.probs, ORACLE_WAIT).values()) - 1.0) < 1e-9


def test_reversal_changes_the_loss(f64, rng):
    p = random_probs(rng, 5, 4)
    for ref in ([1, 2], [1, 2, 3], [3, 1]):
        forward = float(ctc_loss(np.log(p), ref, 0).data)
        backward = float(ctc_loss(np.log(p), ref[::-1], 0).data)
        assert forward != backward


def test_batched_rows_match_single_instances(f64, rng):
    probs = [random_probs(rng, 5, 4), random_probs(rng, 3, 4)]
    refs = [[1, 2, 2], [3]]
    lp = np.full((5, 2, 4), -np.inf)
    lp[:5, 0] = np.log(probs[0])
    lp[:3, 1] = np.log(probs[1])
    lp[3:, 1] = np.log(0.25)  # ignored beyond the row length
    labels = np.array([[1, 2, 2], [3, 0, 0]])
    per_row = ctc_terms(T.tensor(lp), [5, 3], labels, [3, 1], wait_id=0).data
    for b in range(2):
        assert abs(per_row[b] - ctc_bruteforce(probs[b], refs[b], 0)) < 1e-9


def test_oracle_instance_probabilities_are_normalized():
    inst = Instance(np.array([[0.0, 1.0, -1.0]]), [1])
    np.testing.assert_allclose(inst.probs.sum(axis=1), 1.0)


class TestSce:
    def test_wait_steps_contribute_nothing(self, f64):
        probs = np.array([[0.1, 0.1, 0.1, 0.5, 0.2], [0.1, 0.1, 0.6, 0.1, 0.1]])
        trace = trace_from([WAIT, EOS], probs)
        assert abs(float(sce_masked(trace, [EOS]).data) + math.log(0.6)) < 1e-12

    def test_perfect_model_has_zero_loss(self, f64):
        probs = np.eye(8)[[A, B_, EOS]] * (1 - 1e-300) + 1e-300 / 8
        trace = trace_from([A, B_, EOS], probs)
        assert abs(float(sce_masked(trace, [A, B_, EOS]).data)) < 1e-12

    def test_uniform_model(self, f64):
        V, ref = 8, [A, B_, A, EOS]
        trace = trace_from(ref, np.full((4, V), 1 / V))
        assert abs(float(sce_masked(trace, ref).data) - len(ref) * math.log(V)) < 1e-12

    def test_misaligned_reference_rejected(self, f64):
        trace = trace_from([A, EOS], np.full((2, 8), 1 / 8))
        with pytest.raises(ValueError):
            sce_masked(trace, [B_, EOS])


class TestDelay:
    def test_no_waits_no_repeats(self, f64):
        trace = trace_from([A, B_, EOS], np.full((3, 8), 1 / 8))
        assert float(delay_penalty(trace).data) == 0.0

    def test_one_wait_at_half(self, f64):
        probs = np.full((2, 8), 0.5 / 7)
        probs[0, WAIT] = 0.5
        trace = trace_from([WAIT, A], probs)
        assert abs(float(delay_penalty(trace).data) + math.log(0.5)) < 1e-12

    def test_repeat_counts_as_delay(self, f64):
        probs = np.full((2, 8), 0.6 / 7)
        probs[1, A] = 0.4
        trace = trace_from([A, A], probs)
        assert abs(float(delay_penalty(trace).data) + math.log(0.6)) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.001, 0.98), st.floats(0.001, 0.01))
    def test_monotone_in_wait_probability(self, w, dw):
        def penalty(p_wait):
            probs = np.full((1, 8), (1 - p_wait) / 7)
            probs[0, WAIT] = p_wait
            with T.precision(64):
                return float(delay_penalty(trace_from([WAIT], probs)).data)

        assert penalty(w + dw) > penalty(w)


class TestCombined:
    def test_alpha_zero(self):
        assert combined_loss(1.5, 2.0, 9.0, 0.0) == 3.5

    def test_zero_delay_ignores_alpha(self):
        assert combined_loss(1.5, 2.0, 0.0, 0.7) == combined_loss(1.5, 2.0, 0.0, 0.0)

    def test_weighted_delay(self):
        assert combined_loss(1.0, 1.0, 2.0, 0.03) == pytest.approx(2.06, abs=1e-12)

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            combined_loss(1.0, 1.0, 1.0, -0.1)
