"""
Quantize API - мультикодбучная квантизация
"""
from typing import List

import numpy as np
from fastapi import APIRouter
from pydantic import BaseModel

from services.quantizer import Codebook, distortion, quantize_batch, representative_lookup

router = APIRouter(prefix="/quantize", tags=["3 Квантизация"])


class QuantizeRequest(BaseModel):
    sub_codebooks: List[List[List[float]]]  # M x K_m x (E / M)
    vectors: List[List[float]]  # N x E


class LookupRequest(BaseModel):
    sub_codebooks: List[List[List[float]]]
    indices: List[int]


def _codebook(tables: List[List[List[float]]]) -> Codebook:
    return Codebook(sub_codebooks=[np.asarray(table, dtype=np.float64) for table in tables])


@router.post("", summary="Квантизация векторов")
async def quantize_vectors(request: QuantizeRequest):
    """Индексы подкодбуков (при равенстве расстояний - меньший индекс) и искажение"""
    codebook = _codebook(request.sub_codebooks)
    vectors = np.asarray(request.vectors, dtype=np.float64)
    indices = quantize_batch(codebook, vectors)
    return {
        "indices": indices.tolist(),
        "distortion": distortion(codebook, vectors),
    }


@router.post("/lookup", summary="Представительный вектор по индексам")
async def lookup(request: LookupRequest):
    codebook = _codebook(request.sub_codebooks)
    return {"representative": representative_lookup(codebook, request.indices).tolist()}
