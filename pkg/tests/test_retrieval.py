"""Tests for EOS-feature retrieval fine-tuning and ranking."""
import numpy as np
import pytest
import torch

from schemas import CorpusSpec, QuantizerSpec, RetrievalSpec, VocabularySpec
from services.corpus import TokenLayout, make_paired_retrieval_corpus
from services.denoiser import TrainableDenoiser
from services.quantizer import ToySignalCodec, gaussian_mixture_points
from services.retrieval import evaluate_retrieval, finetune_retrieval


@pytest.fixture
def setup(tiny_spec, rng):
    codec = ToySignalCodec(QuantizerSpec(n_codebooks=2, codebook_size=4, embedding_dim=4, hidden=16), tiny_spec.width)
    points, labels = gaussian_mixture_points(200, 4, 4.0, 0.3, rng)
    with torch.no_grad():
        codec.init_codebooks(codec.encoder(torch.as_tensor(points, dtype=torch.float32)), torch.Generator().manual_seed(0))
    layout = TokenLayout.build(VocabularySpec(), CorpusSpec(text_vocab=8), codec)
    corpus = make_paired_retrieval_corpus(20, points, labels, codec, layout, rng)
    model = TrainableDenoiser(tiny_spec, vocab_size=layout.size, drop_token_id=2, codec=codec)
    return model, corpus


class TestRetrieval:
    def test_evaluation_ranges(self, setup):
        model, corpus = setup
        result = evaluate_retrieval(model, corpus)
        assert result.n_pairs == 20
        assert result.random_baseline == pytest.approx(np.sum(1.0 / np.arange(1, 21)) / 20)
        assert 0.0 < result.mrr <= 1.0
        assert result.class_mrr >= result.mrr - 1e-12
        assert result.ratio_to_random == pytest.approx(result.mrr / result.random_baseline)

    def test_finetune_lowers_contrastive_loss(self, setup):
        model, corpus = setup
        losses = finetune_retrieval(model, corpus, RetrievalSpec(finetune_steps=80), torch.Generator().manual_seed(0))
        assert losses["last_loss"] < losses["first_loss"]

    def test_zero_steps_is_noop(self, setup):
        model, corpus = setup
        before = {name: p.clone() for name, p in model.named_parameters()}
        losses = finetune_retrieval(model, corpus, RetrievalSpec(finetune_steps=0), torch.Generator())
        assert losses == {"first_loss": 0.0, "last_loss": 0.0}
        assert all(torch.equal(before[name], p) for name, p in model.named_parameters())
