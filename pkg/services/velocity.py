"""
Кинетически-оптимальная скорость метрического пути и законы скачков CTMC

u_t(x, z | x1) = p_t(x|x1) * ∂β/∂t * max{d(z, x1) - d(x, x1), 0}
"""
import numpy as np
from pydantic import BaseModel, ConfigDict

from services.errors import DomainError, UnsupportedScheduleError
from services.paths import PathSchedule, beta_dot, conditional_table


class JumpLaw(BaseModel):
    """Полная интенсивность λ и распределение цели скачка (нулевая масса на текущем токене)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    total_rate: float
    target_distribution: np.ndarray


def _require_metric(schedule: PathSchedule) -> None:
    if schedule.kind != "metric":
        raise UnsupportedScheduleError(
            "kinetic-optimal velocity is defined for metric schedules; "
            "mixture schedules use the posterior-resampling sampler mode"
        )


def _check_tokens(schedule: PathSchedule, *tokens: int) -> None:
    for token in tokens:
        if not 0 <= token < schedule.vocab_size:
            raise DomainError(f"token {token} outside vocabulary")


def kop_rate(schedule: PathSchedule, x: int, z: int, x1: int, t: float) -> float:
    """Интенсивность перехода z -> x при цели x1"""
    _require_metric(schedule)
    _check_tokens(schedule, x, z, x1)
    d = schedule.distances
    gap = max(d[z, x1] - d[x, x1], 0.0)
    if gap == 0.0:
        return 0.0
    p_t = conditional_table(schedule, t)[x, x1]
    return float(p_t * beta_dot(schedule, t) * gap)


def rate_matrix(schedule: PathSchedule, current: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """
    Интенсивности для N координат сразу: строка n - u_t(., current[n] | x1[n])

    Элемент на текущем токене равен нулю автоматически (зазор d(z,x1) - d(z,x1) = 0).
    """
    _require_metric(schedule)
    d = schedule.distances
    table = conditional_table(schedule, t)
    p_rows = table[:, x1].T  # N x K
    gaps = np.maximum(d[current, x1][:, None] - d[:, x1].T, 0.0)
    return p_rows * beta_dot(schedule, t) * gaps


def jump_law(schedule: PathSchedule, x_current: int, x1_sample: int, t: float) -> JumpLaw:
    """Закон скачка одной координаты"""
    _check_tokens(schedule, x_current, x1_sample)
    rates = rate_matrix(schedule, np.array([x_current]), np.array([x1_sample]), t)[0]
    rates[x_current] = 0.0
    total = float(rates.sum())
    target = rates / total if total > 0 else np.zeros_like(rates)
    return JumpLaw(total_rate=total, target_distribution=target)


def jump_law_batch(schedule: PathSchedule, current: np.ndarray, x1: np.ndarray, t: float):
    """Векторизованные законы скачков: (λ формы N, цели N x K)"""
    rates = rate_matrix(schedule, current, x1, t)
    rates[np.arange(current.shape[0]), current] = 0.0
    totals = rates.sum(axis=1)
    safe = np.where(totals > 0, totals, 1.0)
    return totals, rates / safe[:, None]
