"""
Ранжирование по признаку <EOS>

Дообучение: InfoNCE между признаками текстов и сигналов; тексты и сигналы
кодируются отдельными проходами (одна модальность на проход).
"""
import logging
from typing import Dict

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel

from schemas import RetrievalSpec
from services.corpus import PairedRetrievalCorpus
from services.denoiser import TrainableDenoiser, extract_retrieval_feature, retrieval_features_torch
from services.metrics import mean_reciprocal_rank, random_mrr_baseline

logger = logging.getLogger(__name__)


class RetrievalResult(BaseModel):
    mrr: float
    class_mrr: float
    random_baseline: float
    ratio_to_random: float
    n_pairs: int


def _eos_positions(sequences: np.ndarray, eos_id: int) -> torch.Tensor:
    return torch.as_tensor([int(np.flatnonzero(row == eos_id)[-1]) for row in sequences])


def finetune_retrieval(
    model: TrainableDenoiser,
    corpus: PairedRetrievalCorpus,
    spec: RetrievalSpec,
    generator: torch.Generator,
    batch_size: int = 32,
) -> Dict[str, float]:
    """Симметричный InfoNCE по признакам <EOS>; возвращает первую и последнюю потерю"""
    if spec.finetune_steps == 0:
        return {"first_loss": 0.0, "last_loss": 0.0}
    optimizer = torch.optim.Adam(model.parameters(), lr=spec.lr)
    text = torch.as_tensor(corpus.text_sequences)
    signal = torch.as_tensor(corpus.signal_sequences)
    text_eos = _eos_positions(corpus.text_sequences, model.eos_id)
    signal_eos = _eos_positions(corpus.signal_sequences, model.eos_id)
    model.train()
    first = last = 0.0
    for step in range(spec.finetune_steps):
        batch = torch.randperm(corpus.size, generator=generator)[: min(batch_size, corpus.size)]
        text_features = retrieval_features_torch(model, text[batch], text_eos[batch])
        signal_features = retrieval_features_torch(model, signal[batch], signal_eos[batch])
        logits = text_features @ signal_features.T / spec.temperature
        labels = torch.arange(len(batch))
        loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step == 0:
            first = float(loss.detach())
        last = float(loss.detach())
    logger.info(f"Retrieval fine-tune: InfoNCE {first:.4f} -> {last:.4f}")
    return {"first_loss": first, "last_loss": last}


def evaluate_retrieval(model: TrainableDenoiser, corpus: PairedRetrievalCorpus) -> RetrievalResult:
    """Косинусное ранжирование сигналов по тексту: MRR по парам и по классам"""
    model.eval()
    text = np.stack([extract_retrieval_feature(model, corpus.text_sequence(i)) for i in range(corpus.size)])
    signal = np.stack([extract_retrieval_feature(model, corpus.signal_sequence(i)) for i in range(corpus.size)])
    similarity = text @ signal.T
    relevant = corpus.text_labels[:, None] == corpus.labels[None, :]
    mrr = mean_reciprocal_rank(similarity)
    baseline = random_mrr_baseline(corpus.size)
    return RetrievalResult(
        mrr=mrr,
        class_mrr=mean_reciprocal_rank(similarity, relevant),
        random_baseline=baseline,
        ratio_to_random=mrr / baseline,
        n_pairs=corpus.size,
    )
