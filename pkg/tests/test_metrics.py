import math

import numpy as np
import pytest

from conftest import gen
from kvlatent.errors import ValidationError
from kvlatent.metrics import (
    LogitSequence,
    LossParams,
    cross_entropy,
    kd_loss,
    softmax,
    total_loss,
)


class TestSoftmax:
    def test_uniform_row(self):
        for tau in (0.5, 1.0, 7.0):
            probs = softmax(np.full(5, 3.2), tau)
            assert np.allclose(probs, 0.2)

    def test_closed_form(self):
        probs = softmax(np.array([math.log(2.0), 0.0]), 1.0)
        assert np.allclose(probs, [2.0 / 3.0, 1.0 / 3.0])

    def test_high_temperature_approaches_uniform(self):
        rng = gen(501)
        row = rng.standard_normal(9)
        probs = softmax(row, 1e6)
        assert np.max(np.abs(probs - 1.0 / 9.0)) < 1e-3

    def test_sums_to_one(self):
        rng = gen(502)
        for _ in range(10):
            probs = softmax(rng.standard_normal(6) * 50, 1.0)
            assert math.isclose(probs.sum(), 1.0, rel_tol=1e-12)

    def test_rejects_nonpositive_tau(self):
        with pytest.raises(ValidationError):
            softmax(np.ones(3), 0.0)


class TestCrossEntropy:
    def test_uniform_logits_give_log_vocab(self):
        seq = LogitSequence(np.zeros((4, 7)), np.array([0, 3, 6, 1]))
        assert math.isclose(cross_entropy(seq, 1.0), math.log(7.0), rel_tol=1e-12)

    def test_confident_logits_near_zero(self):
        logits = np.zeros((3, 5))
        targets = np.array([2, 0, 4])
        logits[np.arange(3), targets] = 60.0
        assert cross_entropy(LogitSequence(logits, targets), 1.0) < 1e-12

    def test_matches_per_position_oracle(self):
        rng = gen(511)
        logits = rng.standard_normal((2, 3))
        targets = np.array([1, 2])
        tau = 1.7
        expected = 0.0
        for t in range(2):
            exps = [math.exp(v / tau) for v in logits[t]]
            expected += -math.log(exps[targets[t]] / sum(exps))
        expected /= 2
        got = cross_entropy(LogitSequence(logits, targets), tau)
        assert math.isclose(got, expected, rel_tol=1e-12)

    def test_requires_targets(self):
        with pytest.raises(ValidationError):
            cross_entropy(LogitSequence(np.zeros((2, 3))), 1.0)

    def test_nonnegative(self):
        rng = gen(512)
        for _ in range(10):
            seq = LogitSequence(
                rng.standard_normal((5, 4)), rng.integers(0, 4, size=5)
            )
            assert cross_entropy(seq, 1.0) >= 0.0

    def test_per_row_shift_invariance(self):
        rng = gen(513)
        logits = rng.standard_normal((4, 6))
        targets = rng.integers(0, 6, size=4)
        shifts = rng.standard_normal((4, 1)) * 20
        base = cross_entropy(LogitSequence(logits, targets), 1.4)
        shifted = cross_entropy(LogitSequence(logits + shifts, targets), 1.4)
        assert math.isclose(base, shifted, rel_tol=1e-9)


class TestKdLoss:
    def test_zero_on_identical(self):
        rng = gen(521)
        logits = rng.standard_normal((4, 6))
        assert kd_loss(LogitSequence(logits), LogitSequence(logits.copy()), 2.0) == 0.0

    def test_closed_form(self):
        teacher = LogitSequence(np.array([[math.log(2.0), 0.0]]))
        student = LogitSequence(np.array([[0.0, 0.0]]))
        expected = (2 / 3) * math.log((2 / 3) / 0.5) + (1 / 3) * math.log((1 / 3) / 0.5)
        assert math.isclose(kd_loss(teacher, student, 1.0), expected, rel_tol=1e-12)

    def test_shift_invariance(self):
        rng = gen(522)
        t_logits = rng.standard_normal((3, 5))
        s_logits = rng.standard_normal((3, 5))
        base = kd_loss(LogitSequence(t_logits), LogitSequence(s_logits), 1.3)
        shifted = kd_loss(
            LogitSequence(t_logits + 11.0), LogitSequence(s_logits - 4.0), 1.3
        )
        assert math.isclose(base, shifted, rel_tol=1e-9)

    def test_nonnegative(self):
        rng = gen(523)
        for _ in range(20):
            a = LogitSequence(rng.standard_normal((4, 5)))
            b = LogitSequence(rng.standard_normal((4, 5)))
            assert kd_loss(a, b, 1.0) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            kd_loss(LogitSequence(np.zeros((2, 3))), LogitSequence(np.zeros((2, 4))), 1.0)


class TestTotalLoss:
    def test_zero_beta(self):
        assert total_loss(1.5, 0.7, LossParams(tau=2.0, beta=0.0)) == 1.5

    def test_hand_value(self):
        assert total_loss(1.0, 0.5, LossParams(tau=3.0, beta=2.0)) == 10.0

    def test_zero_kd(self):
        assert total_loss(0.8, 0.0, LossParams(tau=5.0, beta=3.0)) == 0.8

    def test_linear_in_kd_with_slope_beta_tau_sq(self):
        params = LossParams(tau=2.5, beta=1.5)
        at0 = total_loss(0.3, 0.0, params)
        at1 = total_loss(0.3, 1.0, params)
        assert math.isclose(at1 - at0, params.beta * params.tau**2)

    def test_validates_params(self):
        with pytest.raises(ValidationError):
            LossParams(tau=0.0)
        with pytest.raises(ValidationError):
            LossParams(beta=-1.0)


class TestLogitSequence:
    def test_rejects_bad_targets(self):
        with pytest.raises(ValidationError):
            LogitSequence(np.zeros((2, 3)), np.array([0, 3]))
        with pytest.raises(ValidationError):
            LogitSequence(np.zeros((2, 3)), np.array([0]))

    def test_rejects_nonfinite_logits(self):
        with pytest.raises(ValidationError):
            LogitSequence(np.array([[np.inf, 0.0]]))
