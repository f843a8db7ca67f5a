"""
Словари, расписания и условные вероятностные пути p_t(x|x1)

Смешанный путь: (1 - κ_t) p(x) + κ_t δ_{x1}(x)
Метрический путь: Softmax(-β_t d(x, x1)), β_t = c (t / (1 - t))^a
"""
import functools
import logging
from enum import IntEnum
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.special import softmax

from config import config
from schemas import ScheduleSpec, VocabularySpec
from services.errors import DomainError, SizeError, UnsupportedScheduleError
from services.seeding import sample_categorical

logger = logging.getLogger(__name__)

EMBEDDING_NORM_TOL = 1e-6


class Segment(IntEnum):
    """Разметка позиций последовательности"""
    INSTRUCTION = 0
    RESPONSE = 1
    PAD = 2


class Vocabulary(BaseModel):
    """Словарь [K] с единичными эмбеддингами токенов"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    size: int
    token_embeddings: np.ndarray  # K x E
    pad_id: int
    eos_id: int

    @model_validator(mode="after")
    def _check(self):
        if self.size < 2:
            raise ValueError("Vocabulary needs K >= 2")
        if self.token_embeddings.shape[0] != self.size:
            raise ValueError("token_embeddings must have K rows")
        norms = np.linalg.norm(self.token_embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > EMBEDDING_NORM_TOL):
            raise ValueError("token embeddings must be unit-norm")
        if self.pad_id == self.eos_id:
            raise ValueError("PAD and EOS must differ")
        if not (0 <= self.pad_id < self.size and 0 <= self.eos_id < self.size):
            raise ValueError("special ids must be < K")
        return self

    def cosine_distances(self) -> np.ndarray:
        """d[i][j] = 1 - <e_i, e_j>: симметрична, нулевая диагональ, в [0, 2]"""
        gram = self.token_embeddings @ self.token_embeddings.T
        distances = np.clip(1.0 - gram, 0.0, 2.0)
        distances = 0.5 * (distances + distances.T)
        np.fill_diagonal(distances, 0.0)
        return distances


class TokenSequence(BaseModel):
    """Строка индексов длины D с разметкой сегментов"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    tokens: np.ndarray  # int64, D
    segments: np.ndarray  # int8, D (значения Segment)

    @model_validator(mode="after")
    def _check(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.segments = np.asarray(self.segments, dtype=np.int8)
        if self.tokens.shape != self.segments.shape or self.tokens.ndim != 1:
            raise SizeError("tokens and segments must be aligned 1-D arrays")
        return self

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def free_mask(self) -> np.ndarray:
        """Позиции, которые меняет сэмплер (сегмент Response)"""
        return self.segments == Segment.RESPONSE

    @property
    def instruction_length(self) -> int:
        """Длина префикса инструкции (инструкция всегда идет первой)"""
        is_instruction = self.segments == Segment.INSTRUCTION
        if not is_instruction.any():
            return 0
        non_instruction = np.flatnonzero(~is_instruction)
        return int(non_instruction[0]) if non_instruction.size else self.length

    def validate_against(self, vocab: Vocabulary) -> None:
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= vocab.size):
            raise DomainError("token index outside vocabulary")
        pads = self.segments == Segment.PAD
        if np.any(self.tokens[pads] != vocab.pad_id):
            raise DomainError("Pad positions must carry the PAD token")

    def with_tokens(self, tokens: np.ndarray) -> "TokenSequence":
        return TokenSequence(tokens=np.array(tokens, dtype=np.int64), segments=self.segments.copy())


class PathSchedule(BaseModel):
    """Расписание пути: κ_t и базовое распределение (Mixture) либо β_t и d (Metric)"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: Literal["mixture", "metric"]
    vocab_size: int
    kappa_exponent: float = 1.0  # κ(t) = t^n, n = 1 - линейный
    base: Optional[np.ndarray] = None  # K, только Mixture
    c: float = 3.0
    a: float = 0.9
    distances: Optional[np.ndarray] = None  # K x K, только Metric
    eps_clamp: float = 1e-3

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "mixture":
            if self.base is None or self.base.shape != (self.vocab_size,):
                raise ValueError("mixture schedule needs a base distribution over [K]")
            if abs(float(self.base.sum()) - 1.0) > 1e-9 or np.any(self.base < 0):
                raise ValueError("base must be a probability vector")
            if self.kappa_exponent <= 0:
                raise ValueError("kappa exponent must be positive")
        else:
            d = self.distances
            if d is None or d.shape != (self.vocab_size, self.vocab_size):
                raise ValueError("metric schedule needs a K x K distance matrix")
            if not np.allclose(d, d.T) or np.any(np.diag(d) != 0) or d.min() < 0 or d.max() > 2:
                raise ValueError("distance matrix must be symmetric, zero-diagonal, within [0, 2]")
            if self.c <= 0 or self.a <= 0:
                raise ValueError("c and a must be positive")
        return self


class BetaValue(BaseModel):
    """β_t с флагом ограничения сверху"""
    value: float
    clamped: bool = False


# === Построение словарей и расписаний ===

def random_unit_embeddings(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    vectors = rng.standard_normal((count, dim))
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


def build_vocabulary(spec: VocabularySpec, embeddings: Optional[np.ndarray] = None) -> Vocabulary:
    """
    Словарь из спецификации

    Без явных эмбеддингов - фиксированные случайные единичные векторы с seed
    `embedding_seed`.
    """
    if embeddings is None:
        rng = np.random.default_rng(spec.embedding_seed)
        embeddings = random_unit_embeddings(spec.K, spec.embedding_dim, rng)
    return Vocabulary(size=embeddings.shape[0], token_embeddings=embeddings, pad_id=spec.pad_id, eos_id=spec.eos_id)


def build_schedule(spec: ScheduleSpec, vocab: Vocabulary) -> PathSchedule:
    """PathSchedule из ScheduleSpec"""
    exponent = 1.0 if spec.kappa == "linear" else float(spec.kappa.split(":", 1)[1])
    if spec.kind == "mixture":
        if spec.base == "uniform":
            base = np.full(vocab.size, 1.0 / vocab.size)
        else:
            # маскирующая база: вся масса на PAD
            base = np.zeros(vocab.size)
            base[vocab.pad_id] = 1.0
        return PathSchedule(
            kind="mixture", vocab_size=vocab.size, kappa_exponent=exponent, base=base,
            eps_clamp=config.BETA_CLAMP_EPS,
        )
    return PathSchedule(
        kind="metric", vocab_size=vocab.size, c=spec.c, a=spec.a,
        distances=vocab.cosine_distances(), eps_clamp=config.BETA_CLAMP_EPS,
    )


# === Расписания ===

def _check_time(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0) or np.isnan(t):
        raise DomainError(f"time {t} outside [0, 1]")
    return t


def kappa_at(schedule: PathSchedule, t: float) -> float:
    """κ(t) смешанного пути; κ(0) = 0, κ(1) = 1 точно"""
    if schedule.kind != "mixture":
        raise UnsupportedScheduleError("kappa is defined for mixture schedules only")
    t = _check_time(t)
    # TODO: κ, зависящий от значения токена x1, потребует таблицу K значений вместо скаляра
    return float(t ** schedule.kappa_exponent)


def beta_at(schedule: PathSchedule, t: float) -> BetaValue:
    """β_t = c (t / (1 - t))^a, вычисляется в min(t, 1 - ε)"""
    if schedule.kind != "metric":
        raise UnsupportedScheduleError("beta is defined for metric schedules only")
    t = _check_time(t)
    limit = 1.0 - schedule.eps_clamp
    clamped = t >= limit
    t_eff = min(t, limit)
    return BetaValue(value=float(schedule.c * (t_eff / (1.0 - t_eff)) ** schedule.a), clamped=clamped)


def beta_dot(schedule: PathSchedule, t: float) -> float:
    """
    ∂β/∂t = c a t^(a-1) / (1 - t)^(a+1) в замкнутой форме

    Производная расходится в t = 1, а при a < 1 и в t = 0, поэтому t
    ограничивается отрезком [ε, 1 - ε] (нижняя граница - только при a < 1).
    """
    if schedule.kind != "metric":
        raise UnsupportedScheduleError("beta derivative is defined for metric schedules only")
    t = _check_time(t)
    lower = schedule.eps_clamp if schedule.a < 1.0 else 0.0
    t_eff = min(max(t, lower), 1.0 - schedule.eps_clamp)
    if t_eff == 0.0:
        return float(schedule.c) if schedule.a == 1.0 else 0.0
    return float(schedule.c * schedule.a * t_eff ** (schedule.a - 1.0) / (1.0 - t_eff) ** (schedule.a + 1.0))


# === Условные пути ===

def conditional_table(schedule: PathSchedule, t: float) -> np.ndarray:
    """Матрица K x K: столбец x1 содержит p_t(. | x1)"""
    K = schedule.vocab_size
    if schedule.kind == "mixture":
        kappa = kappa_at(schedule, t)
        return (1.0 - kappa) * schedule.base[:, None] + kappa * np.eye(K)
    beta = beta_at(schedule, t).value
    return softmax(-beta * schedule.distances, axis=0)


def conditional_tables(schedule: PathSchedule, times: np.ndarray) -> np.ndarray:
    """Пакет таблиц B x K x K для разных времен"""
    return np.stack([conditional_table(schedule, t) for t in np.asarray(times, dtype=np.float64)])


def conditional_prob(schedule: PathSchedule, x: int, x1: int, t: float) -> float:
    """p_t(x | x1) для одной координаты"""
    K = schedule.vocab_size
    if not (0 <= x < K and 0 <= x1 < K):
        raise DomainError("token index outside vocabulary")
    return float(conditional_table(schedule, t)[x, x1])


def sample_conditional(schedule: PathSchedule, x1: TokenSequence, t: float, rng: np.random.Generator) -> TokenSequence:
    """
    x_t ~ p_t(. | x1), независимо по координатам

    Шумятся только позиции Response; инструкция и Pad копируются.
    """
    table = conditional_table(schedule, t)
    tokens = x1.tokens.copy()
    free = x1.free_mask
    if free.any():
        tokens[free] = sample_categorical(table[:, x1.tokens[free]].T, rng)
    return x1.with_tokens(tokens)


def sample_conditional_batch(
    schedule: PathSchedule,
    x1: np.ndarray,
    free_mask: np.ndarray,
    times: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Пакетная версия: x1 и free_mask формы B x D, свое время для каждого примера"""
    tables = conditional_tables(schedule, times)  # B x K x K
    batch = np.arange(x1.shape[0])[:, None]
    rows = tables.transpose(0, 2, 1)[batch, x1]  # B x D x K - строки p_t(. | x1^i)
    sampled = sample_categorical(rows, rng)
    return np.where(free_mask, sampled, x1)


# === Точные маргиналы ===

class SequenceDistribution(BaseModel):
    """Явное распределение q над S = [K]^D: носитель и веса"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    support: np.ndarray  # S x D
    weights: np.ndarray  # S

    @model_validator(mode="after")
    def _check(self):
        self.support = np.atleast_2d(np.asarray(self.support, dtype=np.int64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.support.shape[0] != self.weights.shape[0]:
            raise SizeError("support and weights must align")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must form a distribution")
        return self

    @property
    def length(self) -> int:
        return int(self.support.shape[1])

    def dense(self, K: int) -> np.ndarray:
        """q как вектор длины K^D (смешанная система счисления, первая позиция старшая)"""
        out = np.zeros(K ** self.length)
        np.add.at(out, state_index(self.support, K), self.weights)
        return out


def state_index(tokens: np.ndarray, K: int) -> np.ndarray:
    """Индекс состояния(ий) в [K]^D"""
    tokens = np.atleast_2d(tokens)
    powers = K ** np.arange(tokens.shape[1] - 1, -1, -1, dtype=np.int64)
    return tokens @ powers


def marginal_oracle(schedule: PathSchedule, q: SequenceDistribution, t: float) -> np.ndarray:
    """
    Точный маргинал p_t(x) = Σ p_t(x|x1) q(x1) полным перебором

    Возвращает вектор длины K^D в порядке state_index.
    """
    K = schedule.vocab_size
    D = q.length
    work = q.support.shape[0] * K ** D
    if work > config.STATE_SPACE_CAP:
        raise SizeError(f"state space {work} exceeds cap {config.STATE_SPACE_CAP}")
    table = conditional_table(schedule, t)
    marginal = np.zeros(K ** D)
    for x1, weight in zip(q.support, q.weights):
        if weight == 0:
            continue
        columns = [table[:, token] for token in x1]
        joint = functools.reduce(np.multiply.outer, columns)
        marginal += weight * joint.reshape(-1)
    return marginal
