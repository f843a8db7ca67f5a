"""
Эйлеров CTMC-сэмплер, CFG и генерация динамической длины

Шаг по каждой свободной координате (сегмент Response):
1. x1 ~ softmax(logits[i])
2. λ - полная интенсивность по jump_law
3. Z ~ U[0, 1]
4. при Z <= 1 - exp(-h λ) координата прыгает по закону цели, иначе остается

Для смешанных расписаний скорость не определена: вместо нее используется
некинетический режим пересэмплирования по постериору (бюджет ceil(D·h) на шаг).
"""
import json
import logging
import math
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import softmax

from schemas import SamplerSpec
from services.denoiser import Denoiser, DenoiserOutput
from services.errors import PreconditionError, SizeError
from services.paths import PathSchedule, Segment, TokenSequence, Vocabulary, conditional_table
from services.seeding import sample_categorical, step_rng, substream
from services.velocity import jump_law_batch

logger = logging.getLogger(__name__)

FINAL_STEP_TOL = 1e-12


class StepRecord(BaseModel):
    """Одна запись трассы (строка JSON-lines)"""
    step: int
    t: float
    jumps: int
    ms: float


class GenerationTrace(BaseModel):
    """Трасса генерации: длина равна числу выполненных шагов"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    records: List[StepRecord] = Field(default_factory=list)
    sequences: List[np.ndarray] = Field(default_factory=list)  # B x D на каждый шаг (если сохраняются)
    final: Optional[np.ndarray] = None  # B x D
    segments: Optional[np.ndarray] = None
    cache_stats: Dict[str, float] = Field(default_factory=dict)
    recompute_fractions: List[float] = Field(default_factory=list)
    truncated: bool = False
    settled_response_length: Optional[int] = None
    config_hash: str = ""
    seed: int = 0

    @property
    def steps_executed(self) -> int:
        return len(self.records)

    @property
    def total_ms(self) -> float:
        return float(sum(record.ms for record in self.records))

    def responses(self) -> np.ndarray:
        """Ответные координаты финальных последовательностей: B x D_response"""
        return self.final[:, self.segments == Segment.RESPONSE]


# === Шаг решателя ===

def cfg_combine(cond_logits: np.ndarray, uncond_logits: np.ndarray, s: float) -> np.ndarray:
    """uncond + s (cond - uncond)"""
    if cond_logits.shape != uncond_logits.shape:
        raise SizeError(f"logit shapes differ: {cond_logits.shape} vs {uncond_logits.shape}")
    if s == 1.0:
        return cond_logits.copy()
    if s == 0.0:
        return uncond_logits.copy()
    return uncond_logits + s * (cond_logits - uncond_logits)


def jump_decisions(totals: np.ndarray, h: float, rng: np.random.Generator) -> np.ndarray:
    """Z <= 1 - exp(-h λ) для каждой координаты"""
    draws = rng.random(totals.shape)
    return (totals > 0) & (draws <= -np.expm1(-h * totals))


def _resample_budgeted(current: np.ndarray, x1: np.ndarray, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Смешанный режим: до `budget` случайных несовпадающих координат на последовательность ставятся в x1"""
    differs = current != x1
    ranks = np.where(differs, rng.random(current.shape), np.inf)
    order = np.argsort(ranks, axis=1, kind="stable")[:, :budget]
    chosen = np.zeros_like(differs)
    np.put_along_axis(chosen, order, True, axis=1)
    chosen &= differs
    return np.where(chosen, x1, current)


def euler_step_batch(
    tokens: np.ndarray,
    free: np.ndarray,
    t: float,
    h: float,
    logits: np.ndarray,
    schedule: PathSchedule,
    rng: np.random.Generator,
    final_step_policy: str = "sample_x1",
    x1_memory: Optional[np.ndarray] = None,
):
    """
    Один шаг для B последовательностей: возвращает (новые токены, число скачков B)

    x1_memory (B x F, -1 = пусто) включает режим сохранения x1 между шагами.
    """
    if logits.shape[:2] != tokens.shape or logits.shape[2] != schedule.vocab_size:
        raise SizeError(f"denoiser output {logits.shape} misaligned with tokens {tokens.shape}")
    if t + h > 1.0 + FINAL_STEP_TOL:
        raise PreconditionError(f"step overshoots t=1: t={t}, h={h}")
    free_idx = np.flatnonzero(free)
    out = tokens.copy()
    if free_idx.size == 0:
        return out, np.zeros(tokens.shape[0], dtype=np.int64)
    probs = softmax(logits[:, free_idx], axis=-1)
    x1 = sample_categorical(probs, rng)
    current = tokens[:, free_idx]
    if x1_memory is not None:
        x1 = np.where((x1_memory >= 0) & (x1_memory != current), x1_memory, x1)

    if t + h >= 1.0 - FINAL_STEP_TOL:
        updated = x1 if final_step_policy == "sample_x1" else probs.argmax(axis=-1)
    elif schedule.kind == "metric":
        totals, targets = jump_law_batch(schedule, current.reshape(-1), x1.reshape(-1), t)
        jump = jump_decisions(totals, h, rng)
        destinations = sample_categorical(targets, rng)
        updated = np.where(jump, destinations, current.reshape(-1)).reshape(current.shape)
    else:
        budget = math.ceil(free_idx.size * h)
        updated = _resample_budgeted(current, x1, budget, rng)

    if x1_memory is not None:
        x1_memory[...] = np.where(updated == x1, -1, x1)
    out[:, free_idx] = updated
    return out, (updated != current).sum(axis=1)


def euler_step(
    x_t: TokenSequence,
    t: float,
    h: float,
    denoiser_output: DenoiserOutput,
    schedule: PathSchedule,
    rng: np.random.Generator,
    final_step_policy: str = "sample_x1",
) -> TokenSequence:
    """Шаг для одной последовательности"""
    logits = np.asarray(denoiser_output.logits)
    if logits.ndim != 2 or logits.shape[0] != x_t.length:
        raise SizeError("denoiser output misaligned with x_t")
    tokens, _ = euler_step_batch(
        x_t.tokens[None, :], x_t.free_mask, t, h, logits[None], schedule, rng, final_step_policy
    )
    return x_t.with_tokens(tokens[0])


# === Генерация ===

def make_prompt(instruction: np.ndarray, response_length: int) -> TokenSequence:
    """Раскладка: инструкция, затем response_length свободных позиций"""
    instruction = np.asarray(instruction, dtype=np.int64)
    tokens = np.concatenate([instruction, np.zeros(response_length, dtype=np.int64)])
    segments = np.concatenate([
        np.full(instruction.shape[0], Segment.INSTRUCTION, dtype=np.int8),
        np.full(response_length, Segment.RESPONSE, dtype=np.int8),
    ])
    return TokenSequence(tokens=tokens, segments=segments)


def initial_tokens(prompt: TokenSequence, n_sessions: int, schedule: PathSchedule, rng: np.random.Generator) -> np.ndarray:
    """x_0: ответ из базового распределения p_0 (не зависит от x1)"""
    base = conditional_table(schedule, 0.0)[:, 0]
    tokens = np.tile(prompt.tokens, (n_sessions, 1))
    free = prompt.free_mask
    tokens[:, free] = sample_categorical(np.broadcast_to(base, (n_sessions, int(free.sum()), base.shape[0])), rng)
    return tokens


def _denoise(denoiser: Denoiser, tokens: np.ndarray, segments: np.ndarray, t: float, guidance_scale: float) -> np.ndarray:
    cond = denoiser(tokens, segments, t, False)
    if guidance_scale == 1.0:
        return cond
    uncond = denoiser(tokens, segments, t, True)
    return cfg_combine(cond, uncond, guidance_scale)


def generate_batch(
    denoiser: Denoiser,
    prompt: TokenSequence,
    spec: SamplerSpec,
    schedule: PathSchedule,
    seed: int,
    n_sessions: int = 1,
    keep_sequences: bool = False,
) -> GenerationTrace:
    """
    N шагов Эйлера на равномерной сетке для n_sessions независимых сессий

    Случайность шага k: default_rng((seed, k)); начальное состояние - из
    отдельного подпотока, поэтому трассы полностью детерминированы.
    """
    if prompt.instruction_length == 0:
        raise PreconditionError("instruction segment must be nonempty")
    if not prompt.free_mask.any():
        raise PreconditionError("prompt has no response positions")
    N = spec.step_count
    h = 1.0 / N
    tokens = initial_tokens(prompt, n_sessions, schedule, substream(seed, "sample-init"))
    free = prompt.free_mask
    memory = np.full((n_sessions, int(free.sum())), -1, dtype=np.int64) if spec.persist_x1 else None
    trace = GenerationTrace(segments=prompt.segments.copy(), seed=seed)
    if keep_sequences:
        trace.sequences.append(tokens.copy())

    for k in range(N):
        t = k / N
        started = time.perf_counter()
        logits = _denoise(denoiser, tokens, prompt.segments, t, spec.guidance_scale)
        tokens, jumps = euler_step_batch(
            tokens, free, t, h, logits, schedule, step_rng(seed, k), spec.final_step_policy, memory
        )
        elapsed = (time.perf_counter() - started) * 1000.0
        trace.records.append(StepRecord(step=k, t=t, jumps=int(jumps.sum()), ms=elapsed))
        if keep_sequences:
            trace.sequences.append(tokens.copy())

    trace.final = tokens
    if hasattr(denoiser, "stats"):
        trace.cache_stats = denoiser.stats()
        trace.recompute_fractions = list(denoiser.step_fractions)
    logger.debug(f"Generated {n_sessions} session(s) in {N} steps ({trace.total_ms:.1f} ms)")
    return trace


def generate(
    denoiser: Denoiser,
    prompt: TokenSequence,
    spec: SamplerSpec,
    schedule: PathSchedule,
    seed: int,
    keep_sequences: bool = True,
):
    """Одна сессия: (финальная последовательность, трасса)"""
    trace = generate_batch(denoiser, prompt, spec, schedule, seed, 1, keep_sequences)
    return prompt.with_tokens(trace.final[0]), trace


def pad_after_eos(tokens: np.ndarray, segments: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Позиции ответа после первого <EOS> переписываются в PAD"""
    out = tokens.copy()
    response = np.flatnonzero(segments == Segment.RESPONSE)
    for row in out:
        eos = np.flatnonzero(row[response] == vocab.eos_id)
        if eos.size:
            row[response[eos[0] + 1:]] = vocab.pad_id
    return out


def last_block_eos_confidence(
    denoiser: Denoiser,
    prompt: TokenSequence,
    spec: SamplerSpec,
    schedule: PathSchedule,
    vocab: Vocabulary,
    rng: np.random.Generator,
    n_sessions: int,
) -> float:
    """
    Пробный шаг: один проход денойзера по текущему состоянию x_0 при
    t_check = 1 - 1/N

    Возвращается средняя по сессиям максимальная вероятность <EOS> в
    последнем блоке.
    """
    tokens = initial_tokens(prompt, n_sessions, schedule, rng)
    free = prompt.free_mask
    t_check = 1.0 - 1.0 / spec.step_count
    probs = softmax(_denoise(denoiser, tokens, prompt.segments, t_check, spec.guidance_scale), axis=-1)
    last_block = np.flatnonzero(free)[-spec.block_size:]
    return float(probs[:, last_block, vocab.eos_id].max(axis=1).mean())


def dynamic_length_generate(
    denoiser: Denoiser,
    instruction: np.ndarray,
    spec: SamplerSpec,
    schedule: PathSchedule,
    vocab: Vocabulary,
    seed: int,
    n_sessions: int = 1,
    keep_sequences: bool = False,
) -> GenerationTrace:
    """
    Блочная генерация: длина ответа растет блоками B, пока уверенность <EOS>
    в последнем блоке ниже θ (не более max_blocks блоков)
    """
    blocks = 1
    length_rng = substream(seed, "length-check")
    truncated = False
    while True:
        prompt = make_prompt(instruction, blocks * spec.block_size)
        confidence = last_block_eos_confidence(denoiser, prompt, spec, schedule, vocab, length_rng, n_sessions)
        logger.debug(f"Length check: blocks={blocks} eos_confidence={confidence:.3f}")
        if confidence >= spec.eos_confidence_threshold:
            break
        if blocks >= spec.max_blocks:
            truncated = True
            logger.warning(f"Dynamic length reached max_blocks={spec.max_blocks} without EOS confidence")
            break
        blocks += 1

    trace = generate_batch(denoiser, prompt, spec, schedule, seed, n_sessions, keep_sequences)
    trace.final = pad_after_eos(trace.final, prompt.segments, vocab)
    trace.truncated = truncated
    trace.settled_response_length = blocks * spec.block_size
    return trace


def write_trace_jsonl(trace: GenerationTrace, path: str) -> None:
    """Трасса в JSON-lines: step, t, jumps, ms"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in trace.records:
            handle.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")
