"""Tests for evaluation metrics and synthetic corpora."""
import numpy as np
import pytest
import torch

from schemas import CorpusSpec, QuantizerSpec, VocabularySpec
from services.corpus import (
    TokenLayout,
    make_enumerable_target,
    make_paired_retrieval_corpus,
    make_signal_corpus,
    make_text_corpus,
)
from services.errors import ConfigError, SizeError
from services.metrics import (
    empirical_distribution,
    empirical_sparse,
    kl_divergence,
    mean_marginal_tv,
    mean_reciprocal_rank,
    random_mrr_baseline,
    tv_distance,
    tv_sparse,
)
from services.paths import Segment
from services.quantizer import ToySignalCodec, gaussian_mixture_points


class TestDistances:
    def test_tv_bounds(self):
        assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
        assert tv_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
        assert tv_distance([0.7, 0.3], [0.4, 0.6]) == pytest.approx(0.3)

    def test_tv_needs_same_support(self):
        with pytest.raises(SizeError):
            tv_distance([1.0], [0.5, 0.5])

    def test_kl(self):
        assert kl_divergence([0.5, 0.5], [0.5, 0.5]).value == 0.0
        result = kl_divergence([0.5, 0.5], [0.25, 0.75])
        assert result.value == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(2 / 3))
        assert not result.infinite

    def test_kl_flags_missing_support(self):
        result = kl_divergence([0.5, 0.5], [1.0, 0.0])
        assert result.infinite
        assert np.isinf(result.value)

    def test_sparse_and_dense_agree(self):
        samples = np.array([[0, 1], [0, 1], [2, 2], [1, 0]])
        dense = empirical_distribution(samples, 3)
        assert dense.sum() == pytest.approx(1.0)
        assert dense[1] == 0.5
        sparse = empirical_sparse(samples)
        assert sparse == {(0, 1): 0.5, (1, 0): 0.25, (2, 2): 0.25}
        assert tv_sparse(sparse, {(0, 1): 1.0}) == pytest.approx(0.5)

    def test_marginal_tv(self):
        a = np.array([[0, 1], [0, 1]])
        b = np.array([[0, 0], [0, 0]])
        assert mean_marginal_tv(a, b, 2) == pytest.approx(0.5)
        with pytest.raises(SizeError):
            mean_marginal_tv(a, b[:, :1], 2)


class TestReciprocalRank:
    def test_perfect_ranking(self):
        assert mean_reciprocal_rank(np.eye(5)) == 1.0

    def test_all_ties_equal_random_baseline(self):
        n = 7
        assert mean_reciprocal_rank(np.zeros((n, n))) == pytest.approx(random_mrr_baseline(n))

    def test_second_place(self):
        similarity = np.array([[0.5, 0.9], [0.1, 0.8]])
        assert mean_reciprocal_rank(similarity) == pytest.approx(0.75)

    def test_class_relevance(self):
        similarity = np.array([[0.1, 0.9, 0.5], [0.9, 0.1, 0.5], [0.2, 0.3, 0.1]])
        relevant = np.array([[True, True, False], [True, True, False], [False, False, True]])
        assert mean_reciprocal_rank(similarity, relevant) == pytest.approx((1.0 + 1.0 + 1.0 / 3) / 3)

    def test_baseline_values(self):
        assert random_mrr_baseline(1) == 1.0
        assert random_mrr_baseline(2) == pytest.approx(0.75)


class TestTextCorpus:
    """Synthetic text corpora with known conditionals."""

    @pytest.fixture
    def layout(self):
        return TokenLayout.build(VocabularySpec(), CorpusSpec(text_vocab=8))

    def test_layout_ranges(self, layout):
        assert layout.signal_offset == 11
        assert layout.size == 11
        assert layout.text_token(9) == 4

    def test_layout_rejects_moved_specials(self):
        with pytest.raises(ValueError):
            TokenLayout(pad_id=2, eos_id=1, text_size=4)

    def test_pattern_corpus(self, layout, rng):
        spec = CorpusSpec(kind="pattern", n_examples=40, text_vocab=8, response_length=4, n_responses=3, n_instructions=2)
        corpus = make_text_corpus(spec, layout, rng)
        assert corpus.sequences.shape == (40, 6)
        assert len(corpus.targets) == 2
        for u in range(2):
            distribution = corpus.response_distribution(u)
            assert len(distribution) == 3
            assert sum(distribution.values()) == pytest.approx(1.0)
        for row, u in zip(corpus.sequences, corpus.instruction_ids):
            np.testing.assert_array_equal(row[:2], corpus.instructions[u])
            assert tuple(row[2:].tolist()) in corpus.response_distribution(u)

    def test_copy_corpus(self, layout, rng):
        corpus = make_text_corpus(CorpusSpec(kind="copy", n_examples=10, text_vocab=8), layout, rng)
        np.testing.assert_array_equal(corpus.sequences[:, :2], corpus.sequences[:, 2:])

    def test_fixed_length_pads_to_block(self, layout, rng):
        spec = CorpusSpec(kind="fixed_length", n_examples=5, text_vocab=8, response_length=5, n_instructions=1, block_size=4)
        corpus = make_text_corpus(spec, layout, rng)
        response = corpus.sequences[0, corpus.segments == Segment.RESPONSE]
        assert response.shape == (8,)
        assert response[5] == layout.eos_id
        assert np.all(response[6:] == layout.pad_id)

    def test_config_errors(self, layout, rng):
        with pytest.raises(ConfigError):
            make_text_corpus(CorpusSpec(kind="pattern", text_vocab=8, n_responses=9), layout, rng)
        with pytest.raises(ConfigError):
            make_text_corpus(CorpusSpec(kind="fixed_length", text_vocab=8), layout, rng)

    def test_enumerable_target(self, rng):
        prompt, q = make_enumerable_target(6, 2, 3, 5, rng)
        assert q.support.shape == (5, 5)
        assert len({tuple(row) for row in q.support}) == 5
        assert np.all(q.support[:, :2] == q.support[0, :2])
        assert prompt.instruction_length == 2
        with pytest.raises(ConfigError):
            make_enumerable_target(2, 1, 2, 5, rng)


class TestSignalCorpora:
    @pytest.fixture
    def codec(self):
        codec = ToySignalCodec(QuantizerSpec(n_codebooks=2, codebook_size=4, embedding_dim=4, hidden=8), 8)
        codec.codebooks.copy_(torch.randn(2, 4, 2))
        return codec

    def test_signal_tokens_in_range(self, codec, rng):
        layout = TokenLayout.build(VocabularySpec(), CorpusSpec(text_vocab=8), codec)
        points, labels = gaussian_mixture_points(50, 3, 4.0, 0.3, rng)
        corpus = make_signal_corpus(points, labels, codec, layout)
        assert corpus.sequences.shape == (50, 3)
        assert np.all(corpus.sequences[:, 1] < layout.signal_offset + 4)
        assert np.all(corpus.sequences[:, 2] >= layout.signal_offset + 4)
        assert all(q.weights.sum() == pytest.approx(1.0) for q in corpus.targets)

    def test_paired_corpus_is_balanced(self, codec, rng):
        layout = TokenLayout.build(VocabularySpec(), CorpusSpec(text_vocab=8), codec)
        points, labels = gaussian_mixture_points(200, 4, 4.0, 0.3, rng)
        paired = make_paired_retrieval_corpus(40, points, labels, codec, layout, rng)
        assert paired.class_counts().tolist() == [10, 10, 10, 10]
        assert np.all(paired.text_sequences[:, -1] == layout.eos_id)
        assert np.all(paired.signal_sequences[:, -1] == layout.eos_id)
        np.testing.assert_array_equal(paired.text_labels, paired.labels)

    def test_shuffled_control_keeps_label_counts(self, codec, rng):
        layout = TokenLayout.build(VocabularySpec(), CorpusSpec(text_vocab=8), codec)
        points, labels = gaussian_mixture_points(200, 4, 4.0, 0.3, rng)
        paired = make_paired_retrieval_corpus(40, points, labels, codec, layout, rng, shuffle_labels=True)
        assert sorted(paired.text_labels.tolist()) == sorted(paired.labels.tolist())
