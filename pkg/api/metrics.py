"""
Metrics API - TV, KL и MRR
"""
from typing import List, Optional

import numpy as np
from fastapi import APIRouter
from pydantic import BaseModel

from services.metrics import kl_divergence, mean_reciprocal_rank, random_mrr_baseline, tv_distance

router = APIRouter(prefix="/metrics", tags=["4 Метрики"])


class DistributionPair(BaseModel):
    p: List[float]
    q: List[float]


class RankingRequest(BaseModel):
    similarity: List[List[float]]
    relevant: Optional[List[List[bool]]] = None


@router.post("/tv", summary="Расстояние полной вариации")
async def total_variation(request: DistributionPair):
    return {"tv": tv_distance(np.asarray(request.p), np.asarray(request.q))}


@router.post("/kl", summary="KL(p || q)")
async def kullback_leibler(request: DistributionPair):
    """Бесконечность возвращается флагом infinite, value тогда null"""
    result = kl_divergence(np.asarray(request.p), np.asarray(request.q))
    return {"kl": None if result.infinite else result.value, "infinite": result.infinite}


@router.post("/mrr", summary="Mean reciprocal rank")
async def reciprocal_rank(request: RankingRequest):
    similarity = np.asarray(request.similarity, dtype=np.float64)
    relevant = np.asarray(request.relevant, dtype=bool) if request.relevant is not None else None
    mrr = mean_reciprocal_rank(similarity, relevant)
    baseline = random_mrr_baseline(similarity.shape[1])
    return {"mrr": mrr, "random_baseline": baseline}
