"""Tests for the kinetic-optimal rates and jump laws of the metric path."""
import numpy as np
import pytest

from services.errors import DomainError, UnsupportedScheduleError
from services.paths import conditional_table
from services.velocity import jump_law, jump_law_batch, kop_rate, rate_matrix


def generator_matrix(schedule, x1: int, t: float) -> np.ndarray:
    """Q[x, z] = rate z -> x, columns sum to zero."""
    K = schedule.vocab_size
    Q = np.zeros((K, K))
    for z in range(K):
        for x in range(K):
            if x != z:
                Q[x, z] = kop_rate(schedule, x, z, x1, t)
        Q[z, z] = -Q[:, z].sum()
    return Q


class TestKopRate:
    """Pointwise rates u_t(x, z | x1)."""

    def test_non_negative(self, metric_schedule):
        for x in range(6):
            for z in range(6):
                assert kop_rate(metric_schedule, x, z, 3, 0.4) >= 0.0

    def test_zero_unless_target_gets_closer(self, metric_schedule):
        d = metric_schedule.distances
        x1 = 2
        for x in range(6):
            for z in range(6):
                if d[x, x1] >= d[z, x1]:
                    assert kop_rate(metric_schedule, x, z, x1, 0.6) == 0.0

    def test_rejects_mixture(self, mixture_schedule):
        with pytest.raises(UnsupportedScheduleError):
            kop_rate(mixture_schedule, 0, 1, 2, 0.5)

    def test_rejects_bad_token(self, metric_schedule):
        with pytest.raises(DomainError):
            kop_rate(metric_schedule, 0, 6, 2, 0.5)

    def test_rate_matrix_agrees_with_pointwise(self, metric_schedule):
        current = np.array([0, 4, 5])
        x1 = np.array([3, 3, 1])
        rates = rate_matrix(metric_schedule, current, x1, 0.3)
        for n in range(3):
            for x in range(6):
                assert rates[n, x] == pytest.approx(kop_rate(metric_schedule, x, current[n], x1[n], 0.3), abs=1e-14)


class TestKolmogorov:
    """The rates transport p_t(. | x1) along the path."""

    @pytest.mark.parametrize("t", [0.2, 0.5, 0.8])
    @pytest.mark.parametrize("x1", [1, 4])
    def test_forward_equation(self, metric_schedule, t, x1):
        step = 1e-6
        p = conditional_table(metric_schedule, t)[:, x1]
        numeric = (conditional_table(metric_schedule, t + step)[:, x1]
                   - conditional_table(metric_schedule, t - step)[:, x1]) / (2 * step)
        flow = generator_matrix(metric_schedule, x1, t) @ p
        np.testing.assert_allclose(flow, numeric, rtol=1e-4, atol=1e-7)


class TestJumpLaw:
    """Total intensity and target distribution for one coordinate."""

    def test_targets_form_distribution(self, metric_schedule):
        d = metric_schedule.distances
        x1 = 3
        x_current = int(np.argmax(d[:, x1]))
        law = jump_law(metric_schedule, x_current, x1, 0.5)
        assert law.total_rate > 0
        assert law.target_distribution.sum() == pytest.approx(1.0)
        assert law.target_distribution[x_current] == 0.0

    def test_no_jump_at_target(self, metric_schedule):
        law = jump_law(metric_schedule, 2, 2, 0.5)
        assert law.total_rate == 0.0
        assert not law.target_distribution.any()

    def test_batch_matches_single(self, metric_schedule):
        current = np.array([0, 5, 2])
        x1 = np.array([4, 4, 2])
        totals, targets = jump_law_batch(metric_schedule, current, x1, 0.7)
        for n in range(3):
            law = jump_law(metric_schedule, int(current[n]), int(x1[n]), 0.7)
            assert totals[n] == pytest.approx(law.total_rate)
            np.testing.assert_allclose(targets[n], law.target_distribution, atol=1e-12)

    def test_rejects_bad_token(self, metric_schedule):
        with pytest.raises(DomainError):
            jump_law(metric_schedule, -1, 2, 0.5)
