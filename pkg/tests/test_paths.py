"""Tests for probability paths: schedules, conditional tables, sampling and exact marginals."""
import numpy as np
import pytest

from config import config
from schemas import ScheduleSpec, VocabularySpec
from services.errors import DomainError, SizeError, UnsupportedScheduleError
from services.metrics import tv_distance
from services.paths import (
    Segment,
    TokenSequence,
    beta_at,
    beta_dot,
    build_schedule,
    build_vocabulary,
    conditional_prob,
    conditional_table,
    kappa_at,
    marginal_oracle,
    sample_conditional,
    sample_conditional_batch,
)
from tests.helpers import make_segments, make_target


class TestSchedules:
    """Scalar schedules of the mixture and metric paths."""

    def test_kappa_endpoints_exact(self, mixture_schedule):
        assert kappa_at(mixture_schedule, 0.0) == 0.0
        assert kappa_at(mixture_schedule, 1.0) == 1.0

    def test_polynomial_kappa(self, vocab):
        schedule = build_schedule(ScheduleSpec(kind="mixture", kappa="poly:2"), vocab)
        assert kappa_at(schedule, 0.5) == pytest.approx(0.25)

    def test_kappa_rejects_metric(self, metric_schedule):
        with pytest.raises(UnsupportedScheduleError):
            kappa_at(metric_schedule, 0.5)

    def test_beta_rejects_mixture(self, mixture_schedule):
        with pytest.raises(UnsupportedScheduleError):
            beta_at(mixture_schedule, 0.5)

    @pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
    def test_time_outside_unit_interval(self, mixture_schedule, t):
        with pytest.raises(DomainError):
            kappa_at(mixture_schedule, t)

    def test_beta_clamped_near_one(self, metric_schedule):
        assert beta_at(metric_schedule, 1.0).clamped
        assert not beta_at(metric_schedule, 0.5).clamped
        assert beta_at(metric_schedule, 1.0).value == beta_at(metric_schedule, 1.0 - metric_schedule.eps_clamp).value

    def test_beta_dot_matches_finite_difference(self, metric_schedule):
        step = 1e-6
        for t in np.linspace(0.05, 0.95, 10):
            numeric = (beta_at(metric_schedule, t + step).value - beta_at(metric_schedule, t - step).value) / (2 * step)
            assert beta_dot(metric_schedule, t) == pytest.approx(numeric, rel=1e-5)

    def test_beta_dot_finite_at_zero(self, metric_schedule):
        assert np.isfinite(beta_dot(metric_schedule, 0.0))


class TestConditionalTable:
    """p_t(. | x1) as columns of a K x K matrix."""

    @pytest.mark.parametrize("kind", ["mixture", "metric"])
    def test_columns_are_distributions(self, vocab, kind):
        schedule = build_schedule(ScheduleSpec(kind=kind), vocab)
        for t in np.linspace(0.0, 1.0, 21):
            table = conditional_table(schedule, t)
            assert np.all(table >= 0)
            np.testing.assert_allclose(table.sum(axis=0), 1.0, atol=1e-12)

    def test_mixture_endpoints(self, mixture_schedule, vocab):
        start = conditional_table(mixture_schedule, 0.0)
        for x1 in range(vocab.size):
            np.testing.assert_array_equal(start[:, x1], mixture_schedule.base)
        np.testing.assert_array_equal(conditional_table(mixture_schedule, 1.0), np.eye(vocab.size))

    def test_mask_base_puts_mass_on_pad(self, vocab):
        schedule = build_schedule(ScheduleSpec(kind="mixture", base="mask"), vocab)
        assert conditional_prob(schedule, vocab.pad_id, 4, 0.0) == 1.0

    def test_metric_concentrates_on_target(self, metric_schedule, vocab):
        start = conditional_table(metric_schedule, 0.0)
        np.testing.assert_allclose(start, 1.0 / vocab.size)
        end = conditional_table(metric_schedule, 1.0)
        assert np.array_equal(end.argmax(axis=0), np.arange(vocab.size))
        assert end.diagonal().min() > 0.99

    def test_conditional_prob_rejects_bad_token(self, metric_schedule):
        with pytest.raises(DomainError):
            conditional_prob(metric_schedule, 6, 0, 0.5)


class TestSampling:
    """Sampling x_t ~ p_t(. | x1)."""

    def test_instruction_is_copied(self, metric_schedule, rng):
        x1 = TokenSequence(tokens=np.array([4, 5, 1, 2, 3]), segments=make_segments(2, 3))
        for _ in range(20):
            sampled = sample_conditional(metric_schedule, x1, 0.1, rng)
            np.testing.assert_array_equal(sampled.tokens[:2], [4, 5])
            np.testing.assert_array_equal(sampled.segments, x1.segments)

    @pytest.mark.parametrize("t", [0.25, 0.75])
    def test_empirical_matches_column(self, metric_schedule, rng, t):
        n = 50_000
        x1 = TokenSequence(tokens=np.full(n, 3), segments=np.full(n, Segment.RESPONSE))
        samples = sample_conditional(metric_schedule, x1, t, rng).tokens
        empirical = np.bincount(samples, minlength=6) / n
        assert tv_distance(empirical, conditional_table(metric_schedule, t)[:, 3]) < 0.02

    def test_batch_respects_free_mask(self, mixture_schedule, rng):
        x1 = np.tile(np.array([1, 2, 3, 4]), (50, 1))
        free = np.broadcast_to(np.array([False, False, True, True]), x1.shape)
        sampled = sample_conditional_batch(mixture_schedule, x1, free, np.zeros(50), rng)
        np.testing.assert_array_equal(sampled[:, :2], x1[:, :2])


class TestMarginalOracle:
    """Exact marginals by enumeration."""

    def test_sums_to_one_and_matches_target_at_end(self, mixture_schedule):
        q = make_target([[1, 2, 3], [4, 4, 0]], weights=[0.25, 0.75])
        for t in (0.0, 0.4, 0.9):
            assert marginal_oracle(mixture_schedule, q, t).sum() == pytest.approx(1.0)
        np.testing.assert_allclose(marginal_oracle(mixture_schedule, q, 1.0), q.dense(6), atol=1e-12)

    def test_start_is_product_of_base(self, mixture_schedule):
        q = make_target([[1, 2]])
        np.testing.assert_allclose(marginal_oracle(mixture_schedule, q, 0.0), np.full(36, 1.0 / 36))

    def test_state_space_cap(self, mixture_schedule, monkeypatch):
        monkeypatch.setattr(config, "STATE_SPACE_CAP", 100)
        with pytest.raises(SizeError):
            marginal_oracle(mixture_schedule, make_target([[1, 2, 3]]), 0.5)


class TestVocabulary:
    def test_unit_embeddings_give_zero_self_distance(self):
        vocab = build_vocabulary(VocabularySpec(K=8))
        distances = vocab.cosine_distances()
        np.testing.assert_allclose(distances.diagonal(), 0.0, atol=1e-12)
        assert distances.shape == (8, 8)
