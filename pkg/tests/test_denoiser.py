"""Tests for the oracle posterior and the trainable denoiser."""
import numpy as np
import pytest
import torch
from torch.func import functional_call

from config import config
from schemas import ScheduleSpec
from services.denoiser import (
    ModelDenoiser,
    OracleDenoiser,
    TrainableDenoiser,
    extract_retrieval_feature,
    forward,
    load_checkpoint,
    oracle_posterior,
    save_checkpoint,
)
from services.errors import PreconditionError, SizeError
from services.paths import TokenSequence, build_schedule
from services.training import dfm_ce_loss
from tests.helpers import make_segments, make_target


@pytest.fixture
def target():
    return make_target([[2, 3, 4, 5, 1], [2, 3, 5, 5, 1], [4, 4, 3, 1, 0]], weights=[0.5, 0.25, 0.25])


@pytest.fixture
def model(tiny_spec):
    return TrainableDenoiser(tiny_spec, vocab_size=6, drop_token_id=2)


class TestOraclePosterior:
    """Exact Bayes posterior over an enumerable target."""

    def test_rows_sum_to_one(self, target, metric_schedule, prompt):
        x_t = prompt.with_tokens(np.array([2, 3, 4, 0, 5]))
        probs = oracle_posterior(target, metric_schedule, x_t, 0.5).probabilities()
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_uniform_mixture_at_start_gives_conditional_prior(self, target, mixture_schedule, prompt):
        x_t = prompt.with_tokens(np.array([2, 3, 0, 0, 0]))
        output = oracle_posterior(target, mixture_schedule, x_t, 0.0)
        assert not output.zero_likelihood
        probs = output.probabilities()
        # инструкция [2, 3] оставляет первые два элемента носителя с весами 2:1
        assert probs[2, 4] == pytest.approx(2.0 / 3.0)
        assert probs[2, 5] == pytest.approx(1.0 / 3.0)
        assert probs[3, 5] == pytest.approx(1.0)

    def test_concentrates_on_observed_sequence_near_end(self, target, metric_schedule, prompt):
        x_t = prompt.with_tokens(np.array([2, 3, 5, 5, 1]))
        probs = oracle_posterior(target, metric_schedule, x_t, 0.999).probabilities()
        assert probs[2, 5] > 0.99

    def test_zero_likelihood_falls_back_to_uniform(self, target, vocab, prompt):
        mask = build_schedule(ScheduleSpec(kind="mixture", base="mask"), vocab)
        x_t = prompt.with_tokens(np.array([2, 3, 3, 3, 3]))
        output = oracle_posterior(target, mask, x_t, 0.0)
        assert output.zero_likelihood
        np.testing.assert_allclose(output.probabilities(), 1.0 / 6)

    def test_support_cap(self, target, metric_schedule, prompt, monkeypatch):
        monkeypatch.setattr(config, "POSTERIOR_SUPPORT_CAP", 2)
        with pytest.raises(SizeError):
            oracle_posterior(target, metric_schedule, prompt, 0.5)

    def test_length_mismatch(self, target, metric_schedule):
        x_t = TokenSequence(tokens=np.array([2, 3, 0]), segments=make_segments(2, 1))
        with pytest.raises(SizeError):
            oracle_posterior(target, metric_schedule, x_t, 0.5)

    def test_batched_denoiser_matches_single(self, target, metric_schedule, prompt):
        batch = np.array([[2, 3, 4, 0, 5], [4, 4, 1, 1, 0]])
        logits = OracleDenoiser(target, metric_schedule)(batch, prompt.segments, 0.3)
        for row, tokens in zip(logits, batch):
            single = oracle_posterior(target, metric_schedule, prompt.with_tokens(tokens), 0.3)
            np.testing.assert_allclose(row, single.logits)


class TestTrainableDenoiser:
    """Shapes, caching invariants and gradients of the transformer denoiser."""

    def test_output_shapes(self, model, prompt):
        output = forward(model, prompt, 0.4)
        assert output.logits.shape == (5, 6)
        assert len(output.hidden_features) == 2
        assert output.value_features[0].shape == (5, 16)

    def test_too_long_sequence(self, model):
        with pytest.raises(SizeError):
            model(torch.zeros(1, 41, dtype=torch.long), torch.tensor([0.5]), 2)

    def test_frozen_prefix_ignores_response_and_time(self, model):
        first = torch.tensor([[3, 4, 5, 0, 1]])
        second = torch.tensor([[3, 4, 1, 2, 3]])
        a = model.encode(first, torch.tensor([0.1]), 3)
        b = model.encode(second, torch.tensor([0.9]), 3)
        assert model.frozen_length(3) == 2
        for h_a, h_b in zip(a.layer_hidden, b.layer_hidden):
            assert torch.allclose(h_a[:, :2], h_b[:, :2], atol=1e-6)
        assert not torch.allclose(a.final_hidden[:, 2:], b.final_hidden[:, 2:])

    def test_first_response_position_sees_state_and_time(self, model):
        tokens = torch.tensor([[3, 4, 5, 0, 1, 3]])
        other = torch.tensor([[3, 4, 1, 3, 3, 5]])
        base = model(tokens, torch.tensor([0.1]), 2)[0, 2]
        assert not torch.allclose(base, model(other, torch.tensor([0.1]), 2)[0, 2])
        assert not torch.allclose(base, model(tokens, torch.tensor([0.9]), 2)[0, 2])

    def test_single_token_instruction_has_no_frozen_prefix(self, model):
        assert model.frozen_length(1) == 0
        logits = model(torch.tensor([[3, 5, 1]]), torch.tensor([0.5]), 1)
        assert torch.isfinite(logits).all()

    def test_shared_attention_leaks_response_into_instruction(self, tiny_spec):
        spec = tiny_spec.model_copy(update={"isolate_instruction": False})
        model = TrainableDenoiser(spec, vocab_size=6, drop_token_id=2)
        a = model.encode(torch.tensor([[3, 4, 5, 0, 1]]), torch.tensor([0.5]), 2)
        b = model.encode(torch.tensor([[3, 4, 1, 2, 3]]), torch.tensor([0.5]), 2)
        assert not torch.allclose(a.final_hidden[:, :2], b.final_hidden[:, :2])

    def test_logit_head_gradients(self, model):
        model = model.double()
        hidden = torch.randn(2, 5, 16, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(model.logits_from_hidden, (hidden,))

    @pytest.mark.parametrize("name", [
        "token_embedding.weight",
        "time_projection.weight",
        "blocks.0.query.weight",
        "blocks.1.mlp.0.weight",
        "text_head.weight",
    ])
    def test_loss_gradients_match_finite_differences(self, model, name):
        model = model.double()
        tokens = torch.tensor([[3, 4, 5, 0, 1, 3, 4, 5], [4, 3, 1, 5, 5, 3, 0, 4]])
        targets = torch.tensor([[3, 4, 5, 5, 1, 0, 0, 0], [4, 3, 3, 4, 5, 1, 0, 0]])
        times = torch.tensor([0.3, 0.7], dtype=torch.float64)
        segments = make_segments(2, 6)
        weight = dict(model.named_parameters())[name].detach().clone().requires_grad_(True)

        def loss_of(value):
            logits = functional_call(model, {name: value}, (tokens, times, 2))
            return dfm_ce_loss(logits, targets, segments)

        assert torch.autograd.gradcheck(loss_of, (weight,), eps=1e-6, atol=1e-6, rtol=1e-4)

    def test_swapping_response_positions_swaps_outputs(self, tiny_spec):
        spec = tiny_spec.model_copy(update={"use_position_embeddings": False})
        model = TrainableDenoiser(spec, vocab_size=6, drop_token_id=2)
        tokens = torch.tensor([[3, 4, 5, 1, 3, 4]])
        swapped = torch.tensor([[3, 4, 3, 1, 5, 4]])
        t = torch.tensor([0.4])
        a = model.encode(tokens, t, 2).final_hidden
        b = model.encode(swapped, t, 2).final_hidden
        assert torch.allclose(a[:, [0, 1, 4, 3, 2, 5]], b, atol=1e-5)
        # логиты сдвинуты на слот: строки 3 и 5 меняются местами
        la, lb = model(tokens, t, 2), model(swapped, t, 2)
        assert torch.allclose(la[:, [0, 1, 2, 5, 4, 3]], lb, atol=1e-5)

    def test_drop_condition_replaces_instruction(self, model):
        dropped = model.drop_condition(torch.tensor([[3, 4, 5, 1]]), 2)
        assert dropped.tolist() == [[2, 2, 5, 1]]

    def test_overfits_single_sequence(self, model):
        tokens = torch.tensor([[3, 4, 5, 1, 0]])
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-2)
        for _ in range(150):
            logits = model(tokens, torch.tensor([1.0]), 2)
            loss = torch.nn.functional.cross_entropy(logits[0, 2:], tokens[0, 2:])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        assert loss.item() < 0.1
        predicted = ModelDenoiser(model)(tokens.numpy(), make_segments(2, 3), 1.0).argmax(axis=-1)
        assert predicted[0, 2:].tolist() == [5, 1, 0]

    def test_checkpoint_round_trip(self, model, prompt, tmp_path):
        path = str(tmp_path / "denoiser.safetensors")
        save_checkpoint(model, path)
        restored = load_checkpoint(path)
        np.testing.assert_allclose(forward(restored, prompt, 0.3).logits, forward(model, prompt, 0.3).logits, atol=1e-6)
        assert restored.architecture() == model.architecture()


class TestRetrievalFeature:
    def test_requires_eos(self, model, prompt):
        with pytest.raises(PreconditionError):
            extract_retrieval_feature(model, prompt.with_tokens(np.array([2, 3, 4, 4, 0])))

    def test_unit_norm(self, model, prompt):
        feature = extract_retrieval_feature(model, prompt.with_tokens(np.array([2, 3, 4, 1, 0])))
        assert feature.shape == (16,)
        assert np.linalg.norm(feature) == pytest.approx(1.0)
