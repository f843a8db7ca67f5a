"""
Метрики оценки: TV, KL, MRR
"""
import logging
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.special import comb

from services.errors import SizeError
from services.paths import state_index

logger = logging.getLogger(__name__)


class KLResult(BaseModel):
    """KL(p || q) с флагом нарушения абсолютной непрерывности"""
    value: float
    infinite: bool = False


def _aligned(p: np.ndarray, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise SizeError(f"distributions enumerate different supports: {p.shape} vs {q.shape}")
    return p, q


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """½ Σ |p - q|"""
    p, q = _aligned(p, q)
    return float(min(0.5 * np.abs(p - q).sum(), 1.0))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> KLResult:
    """Σ p log(p / q); при q(x) = 0 < p(x) - флаг бесконечности"""
    p, q = _aligned(p, q)
    support = p > 0
    if np.any(q[support] == 0):
        return KLResult(value=float("inf"), infinite=True)
    value = float(np.sum(p[support] * np.log(p[support] / q[support])))
    return KLResult(value=max(value, 0.0))


def empirical_distribution(samples: np.ndarray, K: int) -> np.ndarray:
    """Эмпирическое распределение строк (N x D) как вектор длины K^D"""
    samples = np.atleast_2d(samples)
    counts = np.bincount(state_index(samples, K), minlength=K ** samples.shape[1]).astype(np.float64)
    return counts / counts.sum()


def empirical_sparse(samples: np.ndarray) -> Dict[tuple, float]:
    """Эмпирическое распределение строк в виде словаря (для больших D)"""
    rows, counts = np.unique(np.atleast_2d(samples), axis=0, return_counts=True)
    return {tuple(row.tolist()): count / counts.sum() for row, count in zip(rows, counts)}


def tv_sparse(p: Dict[tuple, float], q: Dict[tuple, float]) -> float:
    keys = set(p) | set(q)
    return float(min(0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys), 1.0))


def _expected_reciprocal(greater: int, relevant_ties: int, other_ties: int) -> float:
    """E[1 / ранг первого релевантного] при случайном порядке внутри группы равных"""
    total = comb(relevant_ties + other_ties, relevant_ties)
    value = 0.0
    for before in range(other_ties + 1):
        weight = comb(relevant_ties + other_ties - before - 1, relevant_ties - 1) / total
        value += weight / (greater + 1 + before)
    return value


def mean_reciprocal_rank(similarity: np.ndarray, relevant: Optional[np.ndarray] = None) -> float:
    """
    MRR по матрице сходства n x m (строки - запросы)

    По умолчанию релевантен только кандидат i для запроса i. Ранг - позиция
    первого релевантного кандидата; ничьи разбиваются случайно (берется
    матожидание).
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    if relevant is None:
        relevant = np.eye(similarity.shape[0], similarity.shape[1], dtype=bool)
    reciprocal = []
    for scores, hits in zip(similarity, relevant):
        if not hits.any():
            reciprocal.append(0.0)
            continue
        best = scores[hits].max()
        greater = int((scores[~hits] > best).sum())
        relevant_ties = int((scores[hits] == best).sum())
        other_ties = int((scores[~hits] == best).sum())
        reciprocal.append(_expected_reciprocal(greater, relevant_ties, other_ties))
    return float(np.mean(reciprocal))


def random_mrr_baseline(n: int) -> float:
    """Ожидаемый MRR случайного ранжирования: H_n / n"""
    return float(np.sum(1.0 / np.arange(1, n + 1)) / n)


def mean_marginal_tv(samples_a: np.ndarray, samples_b: np.ndarray, K: int) -> float:
    """Средний по позициям TV между позиционными распределениями токенов"""
    samples_a, samples_b = np.atleast_2d(samples_a), np.atleast_2d(samples_b)
    if samples_a.shape[1] != samples_b.shape[1]:
        raise SizeError("samples have different lengths")
    values = []
    for column in range(samples_a.shape[1]):
        p = np.bincount(samples_a[:, column], minlength=K) / samples_a.shape[0]
        q = np.bincount(samples_b[:, column], minlength=K) / samples_b.shape[0]
        values.append(tv_distance(p, q))
    return float(np.mean(values))
