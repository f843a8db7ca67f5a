"""
Синтетические корпуса

Раскладка словаря: PAD, EOS, DROP (сброс условия для CFG), затем текстовые
токены, затем (если есть кодек) сигнальные токены M подкодбуков подряд.
У каждого корпуса условное распределение ответа по инструкции известно
точно, поэтому для него доступны оракульные проверки.
"""
import logging
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from schemas import CorpusSpec, VocabularySpec
from services.errors import ConfigError
from services.paths import Segment, SequenceDistribution, TokenSequence
from services.quantizer import ToySignalCodec, flatten_codes

logger = logging.getLogger(__name__)

DROP_ID = 2
TEXT_OFFSET = 3


class TokenLayout(BaseModel):
    """Диапазоны id словаря"""
    pad_id: int = 0
    eos_id: int = 1
    drop_id: int = DROP_ID
    text_offset: int = TEXT_OFFSET
    text_size: int
    signal_sizes: List[int] = []

    @model_validator(mode="after")
    def _check(self):
        if {self.pad_id, self.eos_id} != {0, 1}:
            raise ConfigError("PAD and EOS must occupy ids 0 and 1 (id 2 is the condition-drop token)")
        return self

    @property
    def signal_offset(self) -> int:
        return self.text_offset + self.text_size

    @property
    def size(self) -> int:
        return self.signal_offset + sum(self.signal_sizes)

    def text_token(self, value: int) -> int:
        return self.text_offset + int(value) % self.text_size

    @classmethod
    def build(cls, vocab: VocabularySpec, corpus: CorpusSpec, codec: Optional[ToySignalCodec] = None) -> "TokenLayout":
        sizes = [codec.K_m] * codec.M if codec is not None else []
        return cls(pad_id=vocab.pad_id, eos_id=vocab.eos_id, text_size=corpus.text_vocab, signal_sizes=sizes)


class DfmCorpus(BaseModel):
    """Набор пар инструкция/ответ одной модальности с точными условными распределениями"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    modality: str
    sequences: np.ndarray  # N x D, чистые x1
    segments: np.ndarray  # D
    instructions: np.ndarray  # U x n - различные инструкции
    instruction_ids: np.ndarray  # N
    targets: List[SequenceDistribution]  # q(. | инструкция u) над полными последовательностями

    @property
    def size(self) -> int:
        return int(self.sequences.shape[0])

    @property
    def instruction_length(self) -> int:
        return int(self.instructions.shape[1])

    def example(self, index: int) -> TokenSequence:
        return TokenSequence(tokens=self.sequences[index], segments=self.segments)

    def prompt(self, instruction_index: int) -> TokenSequence:
        """Раскладка для генерации: инструкция + свободные позиции ответа"""
        tokens = self.sequences[0].copy()
        tokens[: self.instruction_length] = self.instructions[instruction_index]
        return TokenSequence(tokens=tokens, segments=self.segments)

    def response_distribution(self, instruction_index: int) -> Dict[tuple, float]:
        """q над ответными координатами в виде словаря"""
        q = self.targets[instruction_index]
        response = self.segments == Segment.RESPONSE
        out: Dict[tuple, float] = {}
        for row, weight in zip(q.support, q.weights):
            key = tuple(row[response].tolist())
            out[key] = out.get(key, 0.0) + float(weight)
        return out


def _segments(instruction_length: int, response_length: int) -> np.ndarray:
    return np.concatenate([
        np.full(instruction_length, Segment.INSTRUCTION, dtype=np.int8),
        np.full(response_length, Segment.RESPONSE, dtype=np.int8),
    ])


def _pattern_response(layout: TokenLayout, instruction: np.ndarray, variant: int, length: int) -> np.ndarray:
    """Арифметический шаблон: первый токен (Σ инструкции + variant), дальше шаг variant + 1"""
    start = int(instruction.sum()) + variant
    return np.array([layout.text_token(start + i * (variant + 1)) for i in range(length)], dtype=np.int64)


def _pad_to_block(response: np.ndarray, block_size: int, layout: TokenLayout) -> np.ndarray:
    """Ответ + один EOS + PAD до кратного block_size"""
    length = response.shape[0] + 1
    total = -(-length // block_size) * block_size
    tail = np.full(total - response.shape[0], layout.pad_id, dtype=np.int64)
    tail[0] = layout.eos_id
    return np.concatenate([response, tail])


def make_text_corpus(spec: CorpusSpec, layout: TokenLayout, rng: np.random.Generator) -> DfmCorpus:
    """
    Текстовый корпус одного из видов:
    copy - ответ равен инструкции; constant - один ответ для всех;
    pattern - n_responses равновероятных шаблонных ответов на инструкцию;
    fixed_length - шаблонный ответ длины response_length + EOS/PAD до блока
    """
    n_instr = spec.instruction_length
    response_length = n_instr if spec.kind == "copy" else spec.response_length
    if spec.kind == "pattern" and spec.n_responses > spec.text_vocab:
        raise ConfigError("pattern corpus needs n_responses <= text_vocab for distinct responses")
    if spec.kind == "fixed_length" and spec.block_size is None:
        raise ConfigError("fixed_length corpus needs block_size")

    instructions = np.unique(
        rng.integers(layout.text_offset, layout.signal_offset, size=(spec.n_instructions * 4, n_instr)), axis=0
    )
    instructions = instructions[rng.permutation(len(instructions))[: spec.n_instructions]]

    supports: List[np.ndarray] = []
    for instruction in instructions:
        if spec.kind == "copy":
            responses = [instruction.copy()]
        elif spec.kind == "constant":
            responses = [_pattern_response(layout, np.zeros(1, dtype=np.int64), 0, response_length)]
        elif spec.kind == "pattern":
            responses = [_pattern_response(layout, instruction, j, response_length) for j in range(spec.n_responses)]
        else:
            responses = [_pad_to_block(_pattern_response(layout, instruction, 0, response_length), spec.block_size, layout)]
        supports.append(np.stack([np.concatenate([instruction, r]) for r in responses]))

    D = supports[0].shape[1]
    segments = _segments(n_instr, D - n_instr)
    targets = [
        SequenceDistribution(support=support, weights=np.full(len(support), 1.0 / len(support)))
        for support in supports
    ]
    ids = rng.integers(0, len(instructions), size=spec.n_examples)
    picks = [rng.integers(0, len(supports[u])) for u in ids]
    sequences = np.stack([supports[u][j] for u, j in zip(ids, picks)])
    logger.info(f"Text corpus '{spec.kind}': {spec.n_examples} examples, D={D}, {len(instructions)} instructions")
    return DfmCorpus(
        modality="text",
        sequences=sequences,
        segments=segments,
        instructions=instructions,
        instruction_ids=ids,
        targets=targets,
    )


def make_enumerable_target(
    K: int,
    instruction_length: int,
    response_length: int,
    support_size: int,
    rng: np.random.Generator,
):
    """
    Перечислимая цель для оракульного сэмплинга: (prompt, q)

    Инструкция фиксирована, support_size различных равновероятных ответов над [K].
    """
    if support_size > K ** response_length:
        raise ConfigError("support larger than the response state space")
    instruction = rng.integers(0, K, size=instruction_length)
    seen = set()
    responses = []
    while len(responses) < support_size:
        candidate = tuple(rng.integers(0, K, size=response_length).tolist())
        if candidate not in seen:
            seen.add(candidate)
            responses.append(candidate)
    support = np.array([list(instruction) + list(r) for r in responses], dtype=np.int64)
    q = SequenceDistribution(support=support, weights=np.full(support_size, 1.0 / support_size))
    segments = _segments(instruction_length, response_length)
    prompt = TokenSequence(tokens=support[0].copy(), segments=segments)
    return prompt, q


def make_signal_corpus(
    points: np.ndarray,
    labels: np.ndarray,
    codec: ToySignalCodec,
    layout: TokenLayout,
) -> DfmCorpus:
    """
    Сигнальная модальность: инструкция - текстовый токен компоненты смеси,
    ответ - M сигнальных токенов точки; q(. | компонента) - эмпирическое
    распределение кодов точек этой компоненты
    """
    codes = flatten_codes(codec.encode_points(points), layout.signal_sizes, layout.signal_offset)
    components = np.unique(labels)
    instructions = np.array([[layout.text_token(c)] for c in components], dtype=np.int64)
    index_of = {int(c): i for i, c in enumerate(components)}
    ids = np.array([index_of[int(c)] for c in labels], dtype=np.int64)
    sequences = np.concatenate([instructions[ids], codes], axis=1)
    targets = []
    for u in range(len(components)):
        rows, counts = np.unique(sequences[ids == u], axis=0, return_counts=True)
        targets.append(SequenceDistribution(support=rows, weights=counts / counts.sum()))
    return DfmCorpus(
        modality="signal",
        sequences=sequences,
        segments=_segments(1, codes.shape[1]),
        instructions=instructions,
        instruction_ids=ids,
        targets=targets,
    )


class PairedRetrievalCorpus(BaseModel):
    """Пары (текст, сигнал) с известным соответствием: пара i - текст i и сигнал i"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    text_sequences: np.ndarray  # n x (L + 1), последний токен EOS
    signal_sequences: np.ndarray  # n x (M + 1)
    labels: np.ndarray  # компоненты сигнальных точек
    text_labels: np.ndarray  # компоненты, закодированные в тексте

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    def text_sequence(self, index: int) -> TokenSequence:
        row = self.text_sequences[index]
        return TokenSequence(tokens=row, segments=np.full(row.shape[0], Segment.INSTRUCTION, dtype=np.int8))

    def signal_sequence(self, index: int) -> TokenSequence:
        row = self.signal_sequences[index]
        return TokenSequence(tokens=row, segments=np.full(row.shape[0], Segment.INSTRUCTION, dtype=np.int8))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels)


def make_paired_retrieval_corpus(
    n_pairs: int,
    points: np.ndarray,
    labels: np.ndarray,
    codec: ToySignalCodec,
    layout: TokenLayout,
    rng: np.random.Generator,
    text_length: int = 3,
    shuffle_labels: bool = False,
) -> PairedRetrievalCorpus:
    """
    Парный корпус: сбалансированные по компонентам точки (±1), текст кодирует id компоненты

    shuffle_labels переставляет метки текстов - ранжирование становится случайным.
    """
    components = np.unique(labels)
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in components]
    order = []
    for i in range(n_pairs):
        bucket = per_class[i % len(components)]
        order.append(bucket[(i // len(components)) % len(bucket)])
    order = np.array(order, dtype=np.int64)
    chosen_labels = labels[order]
    text_labels = rng.permutation(chosen_labels) if shuffle_labels else chosen_labels.copy()

    codes = flatten_codes(codec.encode_points(points[order]), layout.signal_sizes, layout.signal_offset)
    eos = np.full((n_pairs, 1), layout.eos_id, dtype=np.int64)
    text = np.array([[layout.text_token(c)] * text_length for c in text_labels], dtype=np.int64)
    return PairedRetrievalCorpus(
        text_sequences=np.concatenate([text, eos], axis=1),
        signal_sequences=np.concatenate([codes, eos], axis=1),
        labels=chosen_labels,
        text_labels=text_labels,
    )
