"""
Адаптивный кэш признаков денойзера

Замороженный префикс инструкции (все слоты, кроме последнего) после
инициализации всегда берется из кэша. Для каждой живой позиции
(последний слот инструкции и ответ) считается свежий value-признак слоя
similarity_layer; при косинусе с закэшированной копией >= τ позиция
переиспользует все закэшированные признаки, иначе пересчитывается весь стек
для этой позиции.

τ <= 0 - пересчетов нет никогда, τ > 1 - пересчитываются все живые позиции.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel

from schemas import CacheSpec
from services.denoiser import TrainableDenoiser, instruction_length_of
from services.errors import ComparisonError, PreconditionError
from services.metrics import empirical_sparse, mean_marginal_tv, tv_sparse
from services.sampler import GenerationTrace

logger = logging.getLogger(__name__)

# справочное ускорение, не проверяется (зависит от железа)
REFERENCE_SPEEDUP = 1.2


@dataclass
class CacheState:
    """Кэш одной сессии генерации (одной ветки условия)"""
    tau: float
    similarity_layer: int = 0
    initialized: bool = False
    instruction_length: int = 0
    frozen_length: int = 0
    length: int = 0
    keys: List[torch.Tensor] = field(default_factory=list)
    values: List[torch.Tensor] = field(default_factory=list)
    final_hidden: Optional[torch.Tensor] = None
    gate_features: Optional[torch.Tensor] = None  # B x R x H (живые позиции) на момент последнего обновления
    tokens_at_refresh: Optional[np.ndarray] = None
    last_refresh_step: Optional[np.ndarray] = None  # B x R
    step: int = 0
    recomputed: int = 0
    reused: int = 0
    served_after_token_change: int = 0
    step_fractions: List[float] = field(default_factory=list)

    @property
    def recompute_fraction(self) -> float:
        total = self.recomputed + self.reused
        return self.recomputed / total if total else 0.0

    def counters(self) -> Dict[str, float]:
        return {
            "recomputed": float(self.recomputed),
            "reused": float(self.reused),
            "served_after_token_change": float(self.served_after_token_change),
            "recompute_fraction": self.recompute_fraction,
        }


def initialize_cache(model: TrainableDenoiser, tokens: torch.Tensor, t: float, instruction_length: int, cache: CacheState) -> torch.Tensor:
    """Первый полный проход: заполняет кэш и возвращает логиты"""
    if cache.similarity_layer >= len(model.blocks):
        raise PreconditionError(f"similarity layer {cache.similarity_layer} outside the {len(model.blocks)}-layer stack")
    with torch.no_grad():
        encoded = model.encode(tokens, torch.full((tokens.shape[0],), float(t)), instruction_length)
        logits = model.logits_from_hidden(encoded.final_hidden)
    n = model.frozen_length(instruction_length)
    cache.keys = [k.clone() for k in encoded.layer_keys]
    cache.values = [v.clone() for v in encoded.layer_values]
    cache.final_hidden = encoded.final_hidden.clone()
    cache.gate_features = encoded.layer_values[cache.similarity_layer][:, n:].clone()
    cache.tokens_at_refresh = tokens.numpy().copy()
    cache.last_refresh_step = np.zeros((tokens.shape[0], tokens.shape[1] - n), dtype=np.int64)
    cache.instruction_length = instruction_length
    cache.frozen_length = n
    cache.length = tokens.shape[1]
    cache.initialized = True
    cache.step = 0
    cache.step_fractions.append(1.0)
    return logits


def _gate_features(model: TrainableDenoiser, h_live: torch.Tensor, cache: CacheState) -> torch.Tensor:
    """Свежие value-признаки слоя гейтинга для всех живых позиций"""
    n = cache.frozen_length
    for layer, block in enumerate(model.blocks):
        q_r, k_r, v_r = block.project(h_live)
        if layer == cache.similarity_layer:
            return v_r
        keys = torch.cat([cache.keys[layer][:, :n], k_r], dim=1)
        values = torch.cat([cache.values[layer][:, :n], v_r], dim=1)
        h_live = block.attend(q_r, keys, values, h_live)
    raise PreconditionError("similarity layer outside the stack")


def cached_forward(model: TrainableDenoiser, tokens: torch.Tensor, t: float, cache: CacheState) -> torch.Tensor:
    """
    Проход с переиспользованием признаков; возвращает логиты B x D x K

    Пересчитывается объединение (по пакету) позиций, не прошедших гейт.
    """
    if not cache.initialized:
        raise PreconditionError("cache must be initialized by a full forward first")
    if tokens.shape[1] != cache.length or tokens.shape[0] != cache.final_hidden.shape[0]:
        raise PreconditionError("sequence layout differs from the cached layout")
    n = cache.frozen_length
    R = cache.length - n
    B = tokens.shape[0]
    cache.step += 1
    with torch.no_grad():
        hidden = model.embed(tokens, torch.full((B,), float(t)), cache.instruction_length)
        h_live = hidden[:, n:]
        if cache.tau > 1.0:
            reuse = torch.zeros(B, R, dtype=torch.bool)
        elif cache.tau <= 0.0:
            reuse = torch.ones(B, R, dtype=torch.bool)
        else:
            fresh = _gate_features(model, h_live, cache)
            similarity = F.cosine_similarity(fresh, cache.gate_features, dim=-1)
            reuse = similarity >= cache.tau

        rows = torch.nonzero(~reuse.all(dim=0)).flatten()
        recompute_rows = rows.numel()
        tokens_np = tokens.numpy()
        changed = tokens_np[:, n:] != cache.tokens_at_refresh[:, n:]
        served = np.ones((B, R), dtype=bool)
        served[:, rows.numpy()] = False
        cache.served_after_token_change += int((served & changed).sum())
        cache.recomputed += B * recompute_rows
        cache.reused += B * (R - recompute_rows)
        cache.step_fractions.append(recompute_rows / R if R else 0.0)

        if recompute_rows:
            full = recompute_rows == R
            positions = n + rows
            h = h_live if full else hidden[:, positions]
            for layer, block in enumerate(model.blocks):
                q, k, v = block.project(h)
                if full:
                    keys = torch.cat([cache.keys[layer][:, :n], k], dim=1)
                    values = torch.cat([cache.values[layer][:, :n], v], dim=1)
                else:
                    keys = cache.keys[layer].clone()
                    values = cache.values[layer].clone()
                    keys[:, positions] = k
                    values[:, positions] = v
                cache.keys[layer] = keys
                cache.values[layer] = values
                if layer == cache.similarity_layer:
                    cache.gate_features[:, rows] = v
                h = block.attend(q, keys, values, h)
            if full:
                cache.final_hidden = torch.cat([cache.final_hidden[:, :n], h], dim=1)
            else:
                cache.final_hidden = cache.final_hidden.clone()
                cache.final_hidden[:, positions] = h
            cache.tokens_at_refresh[:, positions.numpy()] = tokens_np[:, positions.numpy()]
            cache.last_refresh_step[:, rows.numpy()] = cache.step
        return model.logits_from_hidden(cache.final_hidden)


class CachedDenoiser:
    """
    Пакетный денойзер с кэшем: по одному CacheState на ветку условия

    Первый вызов каждой ветки - полный проход, дальше cached_forward.
    """

    def __init__(self, model: TrainableDenoiser, spec: CacheSpec, tau: Optional[float] = None):
        self.model = model
        self.spec = spec
        self.tau = spec.tau if tau is None else tau
        self.vocab_size = model.vocab_size
        self.states: Dict[bool, CacheState] = {}

    def reset(self) -> None:
        self.states = {}

    def __call__(self, tokens, segments, t, condition_dropped=False):
        n = instruction_length_of(segments)
        batch = torch.as_tensor(tokens, dtype=torch.long)
        if condition_dropped:
            batch = self.model.drop_condition(batch, n)
        state = self.states.get(condition_dropped)
        if state is None:
            state = CacheState(tau=self.tau, similarity_layer=self.spec.similarity_layer)
            self.states[condition_dropped] = state
            logits = initialize_cache(self.model, batch, t, n, state)
        else:
            logits = cached_forward(self.model, batch, t, state)
        return logits.double().numpy()

    @property
    def step_fractions(self) -> List[float]:
        """Доля пересчитанных позиций на каждом шаге (ветка условия)"""
        state = self.states.get(False)
        return list(state.step_fractions) if state else []

    def stats(self) -> Dict[str, float]:
        totals = {"recomputed": 0.0, "reused": 0.0, "served_after_token_change": 0.0}
        for state in self.states.values():
            for key in totals:
                totals[key] += state.counters()[key]
        seen = totals["recomputed"] + totals["reused"]
        totals["recompute_fraction"] = totals["recomputed"] / seen if seen else 0.0
        return totals


class SpeedupReport(BaseModel):
    """Сравнение кэшированной и некэшированной генерации"""
    wall_ratio: float
    recompute_fraction: float
    per_step_recompute: List[float]
    tv_drift: float
    marginal_tv_drift: float
    reference_speedup: float = REFERENCE_SPEEDUP


def speedup_report(uncached: GenerationTrace, cached: GenerationTrace, vocab_size: int) -> SpeedupReport:
    """
    Отношение времени (некэшированная / кэшированная), доля пересчета и
    TV-дрейф между эмпирическими распределениями финальных ответов
    """
    if uncached.config_hash != cached.config_hash or uncached.seed != cached.seed:
        raise ComparisonError("traces come from different configs or seeds")
    if uncached.steps_executed != cached.steps_executed:
        raise ComparisonError("traces have different step counts")
    cached_ms = cached.total_ms
    ratio = uncached.total_ms / cached_ms if cached_ms > 0 else 1.0
    fractions = cached.recompute_fractions
    fraction = cached.cache_stats.get("recompute_fraction", 1.0) if cached.cache_stats else 1.0
    drift = tv_sparse(empirical_sparse(uncached.responses()), empirical_sparse(cached.responses()))
    marginal = mean_marginal_tv(uncached.responses(), cached.responses(), vocab_size)
    return SpeedupReport(
        wall_ratio=ratio,
        recompute_fraction=fraction,
        per_step_recompute=fractions,
        tv_drift=drift,
        marginal_tv_drift=marginal,
    )
