"""Вспомогательные конструкторы для тестов."""
import numpy as np

from services.paths import Segment, SequenceDistribution


def make_segments(instruction_length: int, response_length: int) -> np.ndarray:
    """Разметка: инструкция, затем ответ."""
    return np.array(
        [Segment.INSTRUCTION] * instruction_length + [Segment.RESPONSE] * response_length, dtype=np.int8
    )


def make_target(rows, weights=None) -> SequenceDistribution:
    """Явная цель q по строкам носителя (равновероятная по умолчанию)."""
    support = np.asarray(rows, dtype=np.int64)
    if weights is None:
        weights = np.full(len(support), 1.0 / len(support))
    return SequenceDistribution(support=support, weights=np.asarray(weights, dtype=np.float64))


class ConstantDenoiser:
    """Денойзер-заглушка: одни и те же логиты для каждой позиции."""

    def __init__(self, logits_row: np.ndarray):
        self.row = np.asarray(logits_row, dtype=np.float64)
        self.vocab_size = self.row.shape[0]
        self.calls = 0
        self.times = []

    def __call__(self, tokens, segments, t, condition_dropped=False):
        self.calls += 1
        self.times.append(float(t))
        return np.broadcast_to(self.row, tokens.shape + (self.vocab_size,)).copy()


class PositionalEosDenoiser:
    """Уверенный <EOS> ровно на позиции ответа eos_offset, на остальных - нет."""

    def __init__(self, eos_offset: int, vocab_size: int = 6, eos_id: int = 1):
        self.eos_offset = eos_offset
        self.vocab_size = vocab_size
        self.eos_id = eos_id

    def __call__(self, tokens, segments, t, condition_dropped=False):
        logits = np.zeros(tokens.shape + (self.vocab_size,))
        logits[..., self.eos_id] = -10.0
        response = np.flatnonzero(segments == Segment.RESPONSE)
        if self.eos_offset < response.size:
            logits[:, response[self.eos_offset], self.eos_id] = 10.0
        return logits
