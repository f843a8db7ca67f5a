"""Tests for similarity-gated feature caching."""
import numpy as np
import pytest
import torch

from schemas import CacheSpec, SamplerSpec
from services.cache import CacheState, CachedDenoiser, cached_forward, initialize_cache, speedup_report
from services.denoiser import ModelDenoiser, TrainableDenoiser
from services.errors import ComparisonError, PreconditionError
from services.sampler import generate_batch, make_prompt

FIRST = torch.tensor([[3, 4, 5, 0, 1, 2, 5, 4]])
SECOND = torch.tensor([[3, 4, 1, 0, 1, 3, 5, 0]])


@pytest.fixture
def model(tiny_spec):
    model = TrainableDenoiser(tiny_spec, vocab_size=6, drop_token_id=2)
    model.eval()
    return model


def step_once(model, tau, tokens=SECOND, t=0.5):
    cache = CacheState(tau=tau)
    initialize_cache(model, FIRST, 0.2, 2, cache)
    logits = cached_forward(model, tokens, t, cache)
    return cache, logits


class TestCachedForward:
    """Gate decisions and exactness of recomputed positions."""

    def test_forced_recompute_matches_full_forward(self, model):
        _, logits = step_once(model, tau=1.5)
        with torch.no_grad():
            expected = model(SECOND, torch.tensor([0.5]), 2)
        assert torch.allclose(logits, expected, atol=1e-5)

    def test_zero_threshold_serves_stale_logits(self, model):
        cache = CacheState(tau=0.0)
        initial = initialize_cache(model, FIRST, 0.2, 2, cache)
        stale = cached_forward(model, SECOND, 0.5, cache)
        assert torch.equal(stale, initial)
        assert cache.step_fractions[-1] == 0.0
        assert cache.served_after_token_change == 3

    def test_forced_recompute_never_serves_changed_tokens(self, model):
        cache, _ = step_once(model, tau=1.5)
        assert cache.served_after_token_change == 0
        assert cache.recompute_fraction == 1.0

    def test_recompute_grows_with_threshold(self, model):
        fractions = [step_once(model, tau)[0].recompute_fraction for tau in (0.0, 0.5, 0.9, 0.99, 1.5)]
        assert fractions == sorted(fractions)
        assert fractions[0] == 0.0
        assert fractions[-1] == 1.0

    def test_unchanged_tokens_are_reused_at_same_time(self, model):
        cache = CacheState(tau=0.99)
        initialize_cache(model, FIRST, 0.5, 2, cache)
        cached_forward(model, FIRST, 0.5, cache)
        assert cache.step_fractions[-1] == 0.0

    def test_requires_initialization(self, model):
        with pytest.raises(PreconditionError):
            cached_forward(model, FIRST, 0.5, CacheState(tau=0.9))

    def test_layout_must_match(self, model):
        cache = CacheState(tau=0.9)
        initialize_cache(model, FIRST, 0.2, 2, cache)
        with pytest.raises(PreconditionError):
            cached_forward(model, FIRST[:, :6], 0.5, cache)

    def test_similarity_layer_inside_stack(self, model):
        with pytest.raises(PreconditionError):
            initialize_cache(model, FIRST, 0.2, 2, CacheState(tau=0.9, similarity_layer=2))


class TestCachedGeneration:
    """The cached denoiser inside the sampler loop."""

    @pytest.fixture
    def prompt(self):
        return make_prompt(np.array([3, 4]), 6)

    def test_forced_recompute_reproduces_uncached_run(self, model, prompt, metric_schedule):
        spec = SamplerSpec(step_count=6)
        uncached = generate_batch(ModelDenoiser(model), prompt, spec, metric_schedule, seed=9)
        cached = generate_batch(CachedDenoiser(model, CacheSpec(), tau=1.5), prompt, spec, metric_schedule, seed=9)
        np.testing.assert_array_equal(uncached.final, cached.final)
        assert len(cached.recompute_fractions) == 6
        assert cached.cache_stats["recompute_fraction"] == 1.0

    def test_guidance_keeps_separate_branches(self, model, prompt, metric_schedule):
        denoiser = CachedDenoiser(model, CacheSpec(), tau=0.9)
        generate_batch(denoiser, prompt, SamplerSpec(step_count=4, guidance_scale=1.5), metric_schedule, seed=2)
        assert set(denoiser.states) == {False, True}
        stats = denoiser.stats()
        # 6 позиций ответа + слот, предсказывающий первую из них
        assert stats["recomputed"] + stats["reused"] == 2 * 3 * 7

    def test_speedup_report(self, model, prompt, metric_schedule):
        spec = SamplerSpec(step_count=4)
        uncached = generate_batch(ModelDenoiser(model), prompt, spec, metric_schedule, seed=1, n_sessions=8)
        cached = generate_batch(CachedDenoiser(model, CacheSpec(), tau=0.95), prompt, spec, metric_schedule, seed=1, n_sessions=8)
        report = speedup_report(uncached, cached, 6)
        assert report.wall_ratio > 0
        assert 0.0 <= report.recompute_fraction <= 1.0
        assert 0.0 <= report.tv_drift <= 1.0
        assert len(report.per_step_recompute) == 4
        assert report.reference_speedup == 1.2

    def test_speedup_report_rejects_different_seeds(self, model, prompt, metric_schedule):
        spec = SamplerSpec(step_count=2)
        first = generate_batch(ModelDenoiser(model), prompt, spec, metric_schedule, seed=1)
        second = generate_batch(ModelDenoiser(model), prompt, spec, metric_schedule, seed=2)
        with pytest.raises(ComparisonError):
            speedup_report(first, second, 6)
