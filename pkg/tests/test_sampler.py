"""Tests for the Euler CTMC sampler, guidance and dynamic-length generation."""
import json

import numpy as np
import pytest

from schemas import SamplerSpec
from services.denoiser import DenoiserOutput, OracleDenoiser
from services.errors import PreconditionError, SizeError
from services.metrics import empirical_sparse, tv_sparse
from services.paths import TokenSequence
from services.sampler import (
    cfg_combine,
    dynamic_length_generate,
    euler_step,
    generate,
    generate_batch,
    jump_decisions,
    make_prompt,
    pad_after_eos,
    last_block_eos_confidence,
    write_trace_jsonl,
)
from tests.helpers import ConstantDenoiser, PositionalEosDenoiser, make_segments, make_target


def eos_logits(eos_logit: float) -> np.ndarray:
    row = np.zeros(6)
    row[1] = eos_logit
    return row


class TestGuidance:
    def test_scale_one_returns_conditional(self):
        cond, uncond = np.ones((2, 3)), np.zeros((2, 3))
        np.testing.assert_array_equal(cfg_combine(cond, uncond, 1.0), cond)

    def test_scale_zero_returns_unconditional(self):
        cond, uncond = np.ones((2, 3)), np.zeros((2, 3))
        np.testing.assert_array_equal(cfg_combine(cond, uncond, 0.0), uncond)

    def test_extrapolates(self):
        cond, uncond = np.full((1, 2), 3.0), np.full((1, 2), 1.0)
        np.testing.assert_allclose(cfg_combine(cond, uncond, 2.0), 5.0)

    def test_shape_mismatch(self):
        with pytest.raises(SizeError):
            cfg_combine(np.zeros((2, 3)), np.zeros((3, 3)), 1.5)


class TestEulerStep:
    """One solver step on a single sequence."""

    def test_zero_rate_never_jumps(self, rng):
        assert not jump_decisions(np.zeros(1000), 0.5, rng).any()

    def test_large_rate_always_jumps(self, rng):
        assert jump_decisions(np.full(1000, 1e6), 0.5, rng).all()

    def test_jump_frequency_matches_closed_form(self, rng):
        # λ = 2, h = 0.1: P(jump) = 1 - exp(-0.2)
        frequency = jump_decisions(np.full(100_000, 2.0), 0.1, rng).mean()
        assert frequency == pytest.approx(1.0 - np.exp(-0.2), abs=0.005)
        assert 1.0 - np.exp(-0.2) == pytest.approx(0.1813, abs=1e-4)

    def test_overshoot(self, metric_schedule, prompt, rng):
        output = DenoiserOutput(logits=np.zeros((5, 6)))
        with pytest.raises(PreconditionError):
            euler_step(prompt, 0.9, 0.2, output, metric_schedule, rng)

    def test_misaligned_output(self, metric_schedule, prompt, rng):
        with pytest.raises(SizeError):
            euler_step(prompt, 0.0, 0.5, DenoiserOutput(logits=np.zeros((4, 6))), metric_schedule, rng)

    def test_final_step_argmax(self, metric_schedule, prompt, rng):
        logits = np.zeros((5, 6))
        logits[np.arange(5), [0, 0, 4, 5, 1]] = 2.0
        stepped = euler_step(prompt, 0.75, 0.25, DenoiserOutput(logits=logits), metric_schedule, rng, "argmax_x1")
        np.testing.assert_array_equal(stepped.tokens, [2, 3, 4, 5, 1])

    def test_instruction_untouched(self, metric_schedule, prompt, rng):
        output = DenoiserOutput(logits=np.zeros((5, 6)))
        for _ in range(10):
            stepped = euler_step(prompt, 0.5, 0.25, output, metric_schedule, rng)
            np.testing.assert_array_equal(stepped.tokens[:2], [2, 3])


class TestGenerate:
    """Full generation with an oracle denoiser."""

    @pytest.fixture
    def single(self):
        return make_target([[2, 3, 4, 5, 1]])

    @pytest.mark.parametrize("kind", ["metric_schedule", "mixture_schedule"])
    def test_single_support_is_reproduced(self, single, prompt, kind, request):
        schedule = request.getfixturevalue(kind)
        trace = generate_batch(OracleDenoiser(single, schedule), prompt, SamplerSpec(step_count=16), schedule, seed=5, n_sessions=50)
        assert trace.steps_executed == 16
        assert np.all(trace.responses() == [4, 5, 1])

    def test_persisted_x1_reaches_support(self, single, prompt, metric_schedule):
        spec = SamplerSpec(step_count=16, persist_x1=True)
        trace = generate_batch(OracleDenoiser(single, metric_schedule), prompt, spec, metric_schedule, seed=5, n_sessions=20)
        assert np.all(trace.responses() == [4, 5, 1])

    def test_deterministic_under_seed(self, prompt, metric_schedule):
        q = make_target([[2, 3, 4, 5, 1], [2, 3, 0, 0, 5]])
        denoiser = OracleDenoiser(q, metric_schedule)
        first = generate_batch(denoiser, prompt, SamplerSpec(step_count=8), metric_schedule, seed=11, n_sessions=30)
        second = generate_batch(denoiser, prompt, SamplerSpec(step_count=8), metric_schedule, seed=11, n_sessions=30)
        np.testing.assert_array_equal(first.final, second.final)
        assert [r.jumps for r in first.records] == [r.jumps for r in second.records]

    def test_matches_small_target(self, prompt, metric_schedule):
        q = make_target([[2, 3, 4, 5, 1], [2, 3, 0, 0, 5], [2, 3, 1, 4, 4]], weights=[0.5, 0.3, 0.2])
        trace = generate_batch(OracleDenoiser(q, metric_schedule), prompt, SamplerSpec(step_count=64), metric_schedule, seed=3, n_sessions=4000)
        target = {(4, 5, 1): 0.5, (0, 0, 5): 0.3, (1, 4, 4): 0.2}
        assert tv_sparse(empirical_sparse(trace.responses()), target) < 0.06

    def test_requires_instruction(self, metric_schedule):
        prompt = TokenSequence(tokens=np.zeros(3), segments=make_segments(0, 3))
        with pytest.raises(PreconditionError):
            generate_batch(ConstantDenoiser(np.zeros(6)), prompt, SamplerSpec(step_count=4), metric_schedule, seed=0)

    def test_guidance_queries_denoiser_twice(self, prompt, metric_schedule):
        denoiser = ConstantDenoiser(np.zeros(6))
        generate(denoiser, prompt, SamplerSpec(step_count=4, guidance_scale=2.0), metric_schedule, seed=0)
        assert denoiser.calls == 8

    def test_trace_jsonl(self, prompt, metric_schedule, tmp_path):
        _, trace = generate(ConstantDenoiser(np.zeros(6)), prompt, SamplerSpec(step_count=5), metric_schedule, seed=0)
        path = tmp_path / "trace.jsonl"
        write_trace_jsonl(trace, str(path))
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert [row["step"] for row in rows] == [0, 1, 2, 3, 4]
        assert rows[-1]["t"] == pytest.approx(0.8)
        assert set(rows[0]) == {"step", "t", "jumps", "ms"}


class TestDynamicLength:
    """Block-wise length growth driven by EOS confidence."""

    def test_confident_eos_settles_on_one_block(self, metric_schedule, vocab):
        spec = SamplerSpec(step_count=8, block_size=4, max_blocks=3)
        trace = dynamic_length_generate(ConstantDenoiser(eos_logits(10.0)), np.array([3, 4]), spec, metric_schedule, vocab, seed=1)
        assert trace.settled_response_length == 4
        assert not trace.truncated
        assert trace.final.shape == (1, 6)

    def test_missing_eos_truncates_at_max_blocks(self, metric_schedule, vocab):
        spec = SamplerSpec(step_count=8, block_size=4, max_blocks=3)
        trace = dynamic_length_generate(ConstantDenoiser(eos_logits(-10.0)), np.array([3, 4]), spec, metric_schedule, vocab, seed=1)
        assert trace.truncated
        assert trace.settled_response_length == 12

    def test_eos_confidence_is_one_forward_at_last_grid_time(self, metric_schedule, vocab, rng):
        spec = SamplerSpec(step_count=8, block_size=4)
        denoiser = ConstantDenoiser(eos_logits(10.0))
        confidence = last_block_eos_confidence(denoiser, make_prompt(np.array([3, 4]), 4), spec, metric_schedule, vocab, rng, 3)
        assert denoiser.calls == 1
        assert denoiser.times == [pytest.approx(1.0 - 1.0 / 8)]
        assert confidence == pytest.approx(np.exp(10.0) / (np.exp(10.0) + 5.0))

    def test_guided_eos_confidence_adds_unconditional_branch(self, metric_schedule, vocab, rng):
        spec = SamplerSpec(step_count=4, block_size=4, guidance_scale=2.0)
        denoiser = ConstantDenoiser(eos_logits(10.0))
        last_block_eos_confidence(denoiser, make_prompt(np.array([3, 4]), 4), spec, metric_schedule, vocab, rng, 2)
        assert denoiser.calls == 2
        assert denoiser.times == [pytest.approx(0.75)] * 2

    def test_seventy_token_response_settles_at_128(self, metric_schedule, vocab):
        spec = SamplerSpec(step_count=4, block_size=64, max_blocks=4)
        trace = dynamic_length_generate(PositionalEosDenoiser(70), np.array([3, 4]), spec, metric_schedule, vocab, seed=2)
        assert trace.settled_response_length == 128
        assert not trace.truncated
        assert trace.final.shape == (1, 130)
        assert trace.final[0, 2 + 70] == vocab.eos_id
        assert (trace.final[0, 2 + 71:] == vocab.pad_id).all()

    def test_tiny_threshold_settles_on_one_block(self, metric_schedule, vocab):
        spec = SamplerSpec(step_count=4, block_size=64, max_blocks=4, eos_confidence_threshold=1e-9)
        trace = dynamic_length_generate(PositionalEosDenoiser(70), np.array([3, 4]), spec, metric_schedule, vocab, seed=2)
        assert trace.settled_response_length == 64

    def test_pad_after_eos(self, vocab):
        segments = make_segments(1, 5)
        tokens = np.array([[3, 4, 1, 5, 5, 4], [3, 4, 4, 4, 4, 4]])
        padded = pad_after_eos(tokens, segments, vocab)
        np.testing.assert_array_equal(padded, [[3, 4, 1, 0, 0, 0], [3, 4, 4, 4, 4, 4]])

    def test_make_prompt_layout(self):
        prompt = make_prompt(np.array([3, 4]), 3)
        assert prompt.instruction_length == 2
        assert prompt.free_mask.tolist() == [False, False, True, True, True]
