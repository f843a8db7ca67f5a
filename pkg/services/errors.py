"""
Исключения движка

Все доменные ошибки наследуются от ValueError, как и раньше в сервисном слое,
поэтому существующие обработчики `except ValueError` продолжают работать.
"""


class EngineError(ValueError):
    """Базовая ошибка движка"""


class DomainError(EngineError):
    """Аргумент вне допустимой области (время, токен, индекс)"""


class SizeError(EngineError):
    """Превышен лимит пространства состояний или не совпали формы"""


class UnsupportedScheduleError(EngineError):
    """Операция не определена для данного вида расписания"""


class PreconditionError(EngineError):
    """Нарушено предусловие операции"""


class PlanViolationError(EngineError):
    """Батч нарушает план (смешанные модальности)"""


class ConfigError(EngineError):
    """Некорректная конфигурация эксперимента"""


class DivergenceError(EngineError):
    """Обучение разошлось (NaN в функции потерь)"""


class ComparisonError(EngineError):
    """Сравниваемые трассы получены с разными конфигурациями"""


class StageError(EngineError):
    """Ошибка компонента с указанием упавшей стадии пайплайна"""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"Stage '{stage}' failed: {cause}")
