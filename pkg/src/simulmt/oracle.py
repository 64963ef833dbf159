"""Randomized self-checks of the CTC dynamic program against independent oracles."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .objectives import CtcUnreachable, ctc_bruteforce, ctc_loss, path_mass_by_outcome

ORACLE_WAIT = 0  # small instances use id 0 for <wait>, labels 1..|V|


@dataclass
class Instance:
    logits: np.ndarray  # (T, |V| + 1)
    reference: list[int]

    @property
    def probs(self) -> np.ndarray:
        e = np.exp(self.logits - self.logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def random_instance(rng: np.random.Generator, t_range=(2, 6), j_range=(1, 3), v_range=(2, 3)) -> Instance:
    n = int(rng.integers(t_range[0], t_range[1] + 1))
    J = int(rng.integers(j_range[0], j_range[1] + 1))
    V = int(rng.integers(v_range[0], v_range[1] + 1))
    logits = rng.normal(scale=2.0, size=(n, V + 1))
    return Instance(logits, [int(x) for x in rng.integers(1, V + 1, size=J)])


def _dp_value(logits: np.ndarray, reference) -> float:
    with T.no_grad():
        return float(ctc_loss(T.log_softmax(T.tensor(logits)), reference, ORACLE_WAIT).data)


def equivalence_error(inst: Instance) -> float:
    """|DP - brute force|; 0 when both agree the reference is unreachable."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CtcUnreachable)
        dp = _dp_value(inst.logits, inst.reference)
    bf = ctc_bruteforce(inst.probs, inst.reference, ORACLE_WAIT)
    if math.isinf(dp) or math.isinf(bf):
        return 0.0 if dp == bf else math.inf
    return abs(dp - bf)


def gradient_error(inst: Instance, h: float = 1e-6) -> float | None:
    """Max relative error of the taped gradient w.r.t. logits vs. central differences.

    Returns None for unreachable references (the loss is +inf).
    """
    x = T.tensor(inst.logits, requires_grad=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CtcUnreachable)
        loss = ctc_loss(T.log_softmax(x), inst.reference, ORACLE_WAIT)
    if not math.isfinite(float(loss.data)):
        return None
    loss.backward()
    analytic = x.grad
    numeric = np.zeros_like(inst.logits)
    for idx in np.ndindex(*inst.logits.shape):
        up, down = inst.logits.copy(), inst.logits.copy()
        up[idx] += h
        down[idx] -= h
        numeric[idx] = (_dp_value(up, inst.reference) - _dp_value(down, inst.reference)) / (2 * h)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def conservation_error(inst: Instance) -> float:
    """|1 - total path mass over every collapsed outcome|."""
    return abs(1.0 - sum(path_mass_by_outcome(inst.probs, ORACLE_WAIT).values()))


@dataclass
class OracleReport:
    trials: int
    passed: int
    worst_equivalence: float
    worst_gradient: float
    worst_conservation: float
    failures: list[str]

    @property
    def ok(self) -> bool:
        return self.passed == self.trials


def run_oracle_suite(trials: int, seed: int, eq_tol: float = 1e-9, grad_tol: float = 1e-4,
                     mass_tol: float = 1e-9) -> OracleReport:
    """Each trial checks DP vs. enumeration, gradient vs. finite differences and total mass."""
    rng = np.random.default_rng(seed)
    passed = 0
    worst = [0.0, 0.0, 0.0]
    failures = []
    with T.precision(64):
        for i in range(trials):
            inst = random_instance(rng)
            eq = equivalence_error(inst)
            gr = gradient_error(inst)
            mass = conservation_error(inst)
            worst[0] = max(worst[0], eq)
            worst[1] = max(worst[1], gr or 0.0)
            worst[2] = max(worst[2], mass)
            problems = []
            if not eq < eq_tol:
                problems.append(f"equivalence={eq:.3g}")
            if gr is not None and not gr < grad_tol:
                problems.append(f"gradient={gr:.3g}")
            if not mass < mass_tol:
                problems.append(f"mass={mass:.3g}")
            if problems:
                failures.append(f"trial {i}: " + ",".join(problems))
            else:
                passed += 1
    return OracleReport(trials, passed, *worst, failures)
