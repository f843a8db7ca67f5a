"""
Paths API - условные пути, расписания и скорости
"""
from typing import List, Optional

import numpy as np
from fastapi import APIRouter
from pydantic import BaseModel, Field

from schemas import ScheduleSpec, VocabularySpec
from services.errors import DomainError
from services.paths import (
    SequenceDistribution,
    beta_at,
    beta_dot,
    build_schedule,
    build_vocabulary,
    conditional_table,
    kappa_at,
    marginal_oracle,
)
from services.velocity import jump_law

router = APIRouter(prefix="/paths", tags=["1 Пути и скорости"])


class PathRequest(BaseModel):
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    vocabulary: VocabularySpec = Field(default_factory=VocabularySpec)
    t: float


class ConditionalRequest(PathRequest):
    x1: int


class JumpRequest(PathRequest):
    x_current: int
    x1: int


class MarginalRequest(PathRequest):
    support: List[List[int]]
    weights: Optional[List[float]] = None


@router.post("/schedule", summary="Значения расписания в момент t")
async def schedule_values(request: PathRequest):
    """κ(t) для mixture, β(t) и ∂β/∂t для metric"""
    schedule = build_schedule(request.schedule, build_vocabulary(request.vocabulary))
    if schedule.kind == "mixture":
        return {"kind": "mixture", "t": request.t, "kappa": kappa_at(schedule, request.t)}
    beta = beta_at(schedule, request.t)
    return {
        "kind": "metric",
        "t": request.t,
        "beta": beta.value,
        "beta_clamped": beta.clamped,
        "beta_dot": beta_dot(schedule, request.t),
    }


@router.post("/conditional", summary="Распределение p_t(. | x1)")
async def conditional(request: ConditionalRequest):
    schedule = build_schedule(request.schedule, build_vocabulary(request.vocabulary))
    if not 0 <= request.x1 < schedule.vocab_size:
        raise DomainError(f"token {request.x1} outside vocabulary")
    table = conditional_table(schedule, request.t)
    return {"t": request.t, "x1": request.x1, "probabilities": table[:, request.x1].tolist()}


@router.post("/jump", summary="Закон скачка одной координаты")
async def jump(request: JumpRequest):
    schedule = build_schedule(request.schedule, build_vocabulary(request.vocabulary))
    law = jump_law(schedule, request.x_current, request.x1, request.t)
    return {"total_rate": law.total_rate, "target_distribution": law.target_distribution.tolist()}


@router.post("/marginal", summary="Точный маргинал p_t")
async def marginal(request: MarginalRequest):
    """Полный перебор; пространство состояний ограничено STATE_SPACE_CAP"""
    schedule = build_schedule(request.schedule, build_vocabulary(request.vocabulary))
    support = np.asarray(request.support, dtype=np.int64)
    weights = request.weights or [1.0 / len(support)] * len(support)
    q = SequenceDistribution(support=support, weights=np.asarray(weights))
    return {"t": request.t, "probabilities": marginal_oracle(schedule, q, request.t).tolist()}
