"""Общие фикстуры тестов движка."""
import os
import tempfile

# реестр запусков тестов - во временном каталоге, до импорта config
os.environ.setdefault(
    "DATABASE_URL", f"sqlite+aiosqlite:///{os.path.join(tempfile.gettempdir(), 'dfm_test_runs.db')}"
)

import numpy as np
import pytest
import torch

from schemas import ModelSpec, ScheduleSpec, VocabularySpec
from services.paths import TokenSequence, build_schedule, build_vocabulary
from tests.helpers import make_segments


@pytest.fixture
def vocab():
    return build_vocabulary(VocabularySpec())


@pytest.fixture
def metric_schedule(vocab):
    return build_schedule(ScheduleSpec(kind="metric"), vocab)


@pytest.fixture
def mixture_schedule(vocab):
    return build_schedule(ScheduleSpec(kind="mixture"), vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return ModelSpec(layers=2, width=16, heads=2, max_len=40)


@pytest.fixture
def prompt():
    """Инструкция из двух токенов и три позиции ответа."""
    return TokenSequence(tokens=np.array([2, 3, 0, 0, 0]), segments=make_segments(2, 3))


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
