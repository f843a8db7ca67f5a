"""
Sampling API - генерация с оракульным денойзером
"""
from typing import List, Optional

import numpy as np
from fastapi import APIRouter
from fastapi.concurrency import run_in_threadpool
from pydantic import BaseModel, Field

from schemas import SamplerSpec, ScheduleSpec, VocabularySpec
from services.denoiser import OracleDenoiser
from services.paths import Segment, SequenceDistribution, TokenSequence, build_schedule, build_vocabulary
from services.sampler import generate_batch

router = APIRouter(prefix="/sampling", tags=["2 Генерация"])


class OracleSamplingRequest(BaseModel):
    """Цель q задается явно: носитель (полные последовательности) и веса"""
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    vocabulary: VocabularySpec = Field(default_factory=VocabularySpec)
    sampler: SamplerSpec = Field(default_factory=SamplerSpec)
    support: List[List[int]]
    weights: Optional[List[float]] = None
    instruction_length: int = Field(ge=1)
    n_sessions: int = Field(default=16, ge=1, le=10_000)
    seed: int = 0


@router.post("/oracle", summary="Сэмплинг с точным постериором")
async def sample_oracle(request: OracleSamplingRequest):
    """
    Генерация n_sessions ответов для инструкции support[0][:instruction_length]

    Возвращает ответы и сводку трассы (шаги, скачки по шагам, время).
    """
    vocab = build_vocabulary(request.vocabulary)
    schedule = build_schedule(request.schedule, vocab)
    support = np.asarray(request.support, dtype=np.int64)
    weights = request.weights or [1.0 / len(support)] * len(support)
    q = SequenceDistribution(support=support, weights=np.asarray(weights))
    D = q.length
    n = request.instruction_length
    segments = np.array([Segment.INSTRUCTION] * n + [Segment.RESPONSE] * (D - n), dtype=np.int8)
    prompt = TokenSequence(tokens=support[0], segments=segments)
    prompt.validate_against(vocab)

    trace = await run_in_threadpool(
        generate_batch, OracleDenoiser(q, schedule), prompt, request.sampler, schedule, request.seed, request.n_sessions
    )
    return {
        "responses": trace.responses().tolist(),
        "steps_executed": trace.steps_executed,
        "jumps": [record.jumps for record in trace.records],
        "total_ms": trace.total_ms,
    }
