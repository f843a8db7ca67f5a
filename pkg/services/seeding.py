"""
Именованные потоки случайности

Вся случайность эксперимента выводится из одного корневого seed через
именованные подпотоки (corpus / init / train / sample ...).
"""
import hashlib

import numpy as np
import torch


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Независимый numpy-генератор для стадии `name`"""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_name_key(name),)))


def substream_seed(seed: int, name: str) -> int:
    """Целочисленный seed подпотока (для torch.Generator и сессий сэмплера)"""
    return int(substream(seed, name).integers(0, 2**63 - 1))


def torch_generator(seed: int, name: str) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(substream_seed(seed, name))
    return generator


def step_rng(session_seed: int, step: int) -> np.random.Generator:
    """Счетный генератор шага: (seed сессии, номер шага)"""
    return np.random.default_rng((session_seed, step))


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Выборка индексов из категориальных распределений по последней оси (обратная CDF)"""
    probs = np.asarray(probs, dtype=np.float64)
    totals = probs.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(probs / np.where(totals > 0, totals, 1.0), axis=-1)
    u = rng.random(probs.shape[:-1])
    idx = (u[..., None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)
