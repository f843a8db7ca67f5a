"""
Pydantic-схемы конфигурации экспериментов и отчетов

Конфиг эксперимента - один JSON-файл; все значения по умолчанию явно
продублированы в configs/reference.json.
"""
import hashlib
import json
import math
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


PIPELINES = (
    "path-check",
    "oracle-sampling",
    "train-and-sample",
    "dynamic-length",
    "quantizer",
    "cache-bench",
    "retrieval",
    "gradnorm",
)


class ScheduleSpec(BaseModel):
    """Расписание вероятностного пути"""
    kind: Literal["mixture", "metric"] = "metric"
    kappa: str = Field(default="linear", description="linear | poly:<n>")
    c: float = Field(default=3.0, gt=0)
    a: float = Field(default=0.9, gt=0)
    base: Literal["uniform", "mask"] = "uniform"

    @field_validator("kappa")
    @classmethod
    def _check_kappa(cls, value: str) -> str:
        if value == "linear":
            return value
        if value.startswith("poly:"):
            exponent = float(value.split(":", 1)[1])
            if exponent <= 0:
                raise ValueError("poly exponent must be positive")
            return value
        raise ValueError(f"Unknown kappa '{value}'")


class VocabularySpec(BaseModel):
    """Словарь игрушечной задачи"""
    K: int = Field(default=6, ge=2)
    embedding_dim: int = Field(default=16, ge=1)
    embedding_seed: int = 7
    pad_id: int = 0
    eos_id: int = 1

    @model_validator(mode="after")
    def _check_specials(self):
        if self.pad_id == self.eos_id:
            raise ValueError("pad_id and eos_id must differ")
        if not (0 <= self.pad_id < self.K and 0 <= self.eos_id < self.K):
            raise ValueError("special token ids must be < K")
        return self


class ModelSpec(BaseModel):
    """Дескриптор архитектуры обучаемого денойзера"""
    layers: int = Field(default=2, ge=1)
    width: int = Field(default=64, ge=4)
    heads: int = Field(default=4, ge=1)
    max_len: int = Field(default=320, ge=2)
    use_position_embeddings: bool = True
    isolate_instruction: bool = True
    time_on_instruction: bool = False

    @model_validator(mode="after")
    def _check_heads(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        return self


class SamplerSpec(BaseModel):
    """SamplerConfig: сетка Эйлера, CFG и блочная генерация"""
    step_count: int = Field(default=64, ge=1)
    guidance_scale: float = Field(default=1.0, ge=0)
    block_size: int = Field(default=64, ge=1)
    max_blocks: int = Field(default=4, ge=1)
    eos_confidence_threshold: float = Field(default=0.5, gt=0, lt=1)
    final_step_policy: Literal["sample_x1", "argmax_x1"] = "sample_x1"
    persist_x1: bool = False


class CacheSpec(BaseModel):
    """Адаптивный кэш признаков"""
    tau: float = 0.95
    similarity_layer: int = Field(default=0, ge=0)
    taus: List[float] = Field(default_factory=lambda: [0.9, 0.95, 0.99])
    bench_response_length: int = Field(default=256, ge=1)
    bench_step_count: int = Field(default=64, ge=1)
    bench_sessions: int = Field(default=8, ge=1)
    bench_training_steps: int = Field(default=300, ge=0)
    bench_checkpoint: Optional[str] = None
    max_marginal_drift: float = Field(default=0.25, gt=0.0, le=1.0)


class CorpusSpec(BaseModel):
    """Синтетический корпус"""
    kind: Literal["copy", "constant", "pattern", "fixed_length"] = "pattern"
    n_examples: int = Field(default=512, ge=1)
    text_vocab: int = Field(default=16, ge=2)
    instruction_length: int = Field(default=2, ge=1)
    response_length: int = Field(default=6, ge=1)
    n_instructions: int = Field(default=4, ge=1)
    n_responses: int = Field(default=8, ge=1)
    block_size: Optional[int] = Field(default=None, ge=1)


class QuantizerSpec(BaseModel):
    """Мультикодбучный квантователь и игрушечная модальность"""
    n_codebooks: int = Field(default=2, ge=1)
    codebook_size: int = Field(default=16, ge=1)
    embedding_dim: int = Field(default=8, ge=1)
    hidden: int = Field(default=64, ge=1)
    n_points: int = Field(default=2048, ge=1)
    n_components: int = Field(default=8, ge=1)
    component_radius: float = 4.0
    component_std: float = 0.3
    steps: int = Field(default=1500, ge=1)
    batch_size: int = Field(default=256, ge=1)
    lr: float = Field(default=3e-3, gt=0)
    ema_decay: float = Field(default=0.99, gt=0, lt=1)
    dead_code_steps: int = Field(default=100, ge=1)
    commitment_weight: float = Field(default=0.25, ge=0)
    layout: Literal["flattened", "fused"] = "flattened"

    @model_validator(mode="after")
    def _check_split(self):
        if self.embedding_dim % self.n_codebooks != 0:
            raise ValueError("embedding_dim must be divisible by n_codebooks")
        return self


class TrainingSpec(BaseModel):
    """Обучение денойзера"""
    steps: int = Field(default=400, ge=1)
    batch_size: int = Field(default=64, ge=1)
    optimizer: Literal["sgd", "adam"] = "sgd"
    lr: float = Field(default=3e-3, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    cfg_drop_prob: float = Field(default=0.1, ge=0, le=1)
    accumulation_steps: int = Field(default=1, ge=1)
    gradnorm_alpha: float = Field(default=1.0, ge=0)
    gradnorm_lr: float = Field(default=0.01, gt=0)
    gradnorm_every: int = Field(default=1, ge=1)
    eval_samples: int = Field(default=512, ge=1)


class OracleSpec(BaseModel):
    """Перечислимая целевая задача для оракульного сэмплинга"""
    support_size: int = Field(default=8, ge=1)
    instruction_length: int = Field(default=2, ge=1)
    n_runs: int = Field(default=20000, ge=1)
    step_count: int = Field(default=256, ge=1)
    response_length: int = Field(default=6, ge=1)
    t_grid: int = Field(default=101, ge=2)
    path_samples: int = Field(default=100_000, ge=1)


class RetrievalSpec(BaseModel):
    """Ранжирование по признаку <EOS>"""
    n_pairs: int = Field(default=100, ge=1)
    finetune_steps: int = Field(default=300, ge=0)
    temperature: float = Field(default=0.1, gt=0)
    lr: float = Field(default=3e-3, gt=0)
    shuffle_labels: bool = False


class OutputSpec(BaseModel):
    """Пути результатов"""
    report_path: str = "reports/report.json"
    trace_path: Optional[str] = None
    curves_path: Optional[str] = None
    checkpoint_path: Optional[str] = None


class ExperimentConfig(BaseModel):
    """Полная конфигурация эксперимента"""
    pipeline: str = "oracle-sampling"
    seed: int = 20240601
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    vocabulary: VocabularySpec = Field(default_factory=VocabularySpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    sampler: SamplerSpec = Field(default_factory=SamplerSpec)
    cache: CacheSpec = Field(default_factory=CacheSpec)
    corpus: CorpusSpec = Field(default_factory=CorpusSpec)
    quantizer: QuantizerSpec = Field(default_factory=QuantizerSpec)
    training: TrainingSpec = Field(default_factory=TrainingSpec)
    oracle: OracleSpec = Field(default_factory=OracleSpec)
    retrieval: RetrievalSpec = Field(default_factory=RetrievalSpec)
    outputs: OutputSpec = Field(default_factory=OutputSpec)

    def canonical_json(self) -> str:
        """Каноническая сериализация (сортированные ключи, без пробелов)"""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def dump(self, path: str) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.model_dump_json(indent=2), encoding="utf-8")


class MetricReport(BaseModel):
    """Машиночитаемый отчет эксперимента"""
    pipeline: str
    metrics: Dict[str, float] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    reference: Dict[str, float] = Field(default_factory=dict)
    violations: List[str] = Field(default_factory=list)
    config_hash: str
    seed: int
    timestamp: str = Field(default_factory=lambda: datetime.utcnow().isoformat())

    @field_validator("metrics", "timings")
    @classmethod
    def _finite(cls, values: Dict[str, float]) -> Dict[str, float]:
        for name, value in values.items():
            if not math.isfinite(value):
                raise ValueError(f"metric '{name}' is not finite")
        return values

    def to_json(self) -> str:
        """Стабильный JSON (ключи отсортированы) для побайтового сравнения"""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)
