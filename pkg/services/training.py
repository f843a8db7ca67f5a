"""
Обучение денойзера: DFM cross-entropy, CFG-дропаут, комбинированная потеря
l_overall = λ1·l_ce + λ2·l_rec_sig + λ3·l_rec_aux и балансировка GradNorm

Батч всегда одномодальный; планировщик чередует модальности по кругу и
накапливает градиенты accumulation_steps микробатчей.
"""
import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from schemas import TrainingSpec
from services.corpus import DfmCorpus
from services.denoiser import TrainableDenoiser, oracle_posterior_batch
from services.errors import DivergenceError, PlanViolationError, PreconditionError
from services.paths import PathSchedule, Segment, sample_conditional_batch
from services.quantizer import ToySignalCodec

logger = logging.getLogger(__name__)

TASKS = ("l_ce", "l_rec_sig", "l_rec_aux")


class LossBreakdown(BaseModel):
    """Части потери и коэффициенты; l_overall пересобирается из частей"""
    l_ce: float
    l_rec_sig: float = 0.0
    l_rec_aux: float = 0.0
    lambdas: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    l_overall: float
    modality: str = "text"
    dropped: int = 0
    grad_norms: Tuple[float, ...] = ()

    @model_validator(mode="after")
    def _check(self):
        if any(value <= 0 for value in self.lambdas):
            raise ValueError("loss coefficients must be positive")
        recomposed = self.lambdas[0] * self.l_ce + self.lambdas[1] * self.l_rec_sig + self.lambdas[2] * self.l_rec_aux
        if abs(recomposed - self.l_overall) > 1e-9 * max(1.0, abs(recomposed)):
            raise ValueError("l_overall does not match its parts")
        return self


class BatchPlan(BaseModel):
    """Упорядоченные одномодальные батчи"""
    batches: List[Tuple[str, List[int]]] = Field(default_factory=list)
    accumulation_steps: int = 1

    def tag_histogram(self) -> Dict[str, int]:
        histogram: Dict[str, int] = {}
        for tag, _ in self.batches:
            histogram[tag] = histogram.get(tag, 0) + 1
        return histogram


class TrainingBatch(BaseModel):
    """Микробатч: чистые последовательности одной модальности (+ точки для сигнальной)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x1: np.ndarray  # B x D
    segments: np.ndarray  # D
    modality_tags: List[str]
    points: Optional[np.ndarray] = None  # B x 2

    @property
    def modality(self) -> str:
        return self.modality_tags[0]


# === Потеря ===

def dfm_ce_loss(logits: torch.Tensor, targets: torch.Tensor, segments: np.ndarray) -> torch.Tensor:
    """
    Среднее по позициям Response значение -log softmax(logits[i])[x1^i]

    targets - индексы B x D или мягкие цели B x D x K (вероятности).
    Instruction и Pad вклада не дают.
    """
    response = torch.as_tensor(np.asarray(segments) == Segment.RESPONSE)
    if not bool(response.any()):
        raise PreconditionError("response segment is empty")
    log_probs = F.log_softmax(logits[:, response], dim=-1)
    if targets.dim() == logits.dim():
        per_token = -(targets[:, response] * log_probs).sum(dim=-1)
    else:
        per_token = -log_probs.gather(-1, targets[:, response].unsqueeze(-1)).squeeze(-1)
    return per_token.mean()


# === GradNorm ===

def gradnorm_update(
    lambdas: np.ndarray,
    grad_norms: np.ndarray,
    initial_losses: np.ndarray,
    current_losses: np.ndarray,
    alpha: float,
    lr: float = 0.01,
) -> np.ndarray:
    """
    Один шаг GradNorm

    G_k = λ_k ||∇L_k||, цель_k = mean(G) · r_k^alpha, где r_k - относительная
    обратная скорость обучения; λ_k ← λ_k · exp(-lr · sign(G_k - цель_k)),
    затем сумма λ нормируется на число задач.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64)
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    if np.any(lambdas <= 0) or not np.all(np.isfinite(grad_norms)):
        raise PreconditionError("GradNorm needs positive coefficients and finite gradient norms")
    weighted = lambdas * grad_norms
    mean_norm = weighted.mean()
    if mean_norm == 0.0:
        logger.warning("GradNorm update skipped: mean gradient norm is zero")
        return lambdas.copy()
    ratios = np.asarray(current_losses, dtype=np.float64) / np.asarray(initial_losses, dtype=np.float64)
    relative = ratios / ratios.mean()
    target = mean_norm * relative ** alpha
    updated = lambdas * np.exp(-lr * np.sign(weighted - target))
    return updated * (len(lambdas) / updated.sum())


def _gradient_norm(loss: torch.Tensor, params: Sequence[torch.nn.Parameter]) -> float:
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    squared = sum(float((g.detach() ** 2).sum()) for g in grads if g is not None)
    return squared ** 0.5


class GradNormBalancer:
    """Коэффициенты λ по градиентам частей потери относительно общей группы параметров"""

    def __init__(self, shared_params: Sequence[torch.nn.Parameter], n_tasks: int, alpha: float, lr: float, every: int = 1):
        self.shared_params = list(shared_params)
        self.lambdas = np.ones(n_tasks)
        self.alpha = alpha
        self.lr = lr
        self.every = every
        self.initial_losses: Optional[np.ndarray] = None
        self.updates = 0
        self.calls = 0

    def step(self, losses: Sequence[torch.Tensor]) -> np.ndarray:
        """Возвращает сырые нормы градиентов ||∇L_k||; λ обновляются раз в `every` вызовов"""
        norms = np.array([_gradient_norm(loss, self.shared_params) for loss in losses])
        values = np.array([float(loss.detach()) for loss in losses])
        if self.initial_losses is None:
            self.initial_losses = np.where(values > 0, values, 1.0)
        self.calls += 1
        if self.calls % self.every == 0:
            self.lambdas = gradnorm_update(self.lambdas, norms, self.initial_losses, values, self.alpha, self.lr)
            self.updates += 1
        return norms


def synthetic_gradnorm_problem(
    steps: int = 500,
    imbalance: float = 10.0,
    alpha: float = 1.0,
    lr: float = 0.01,
    param_lr: float = 1e-4,
    dim: int = 8,
    generator: Optional[torch.Generator] = None,
) -> Dict[str, List[float]]:
    """
    Две потери над общим w: imbalance·||w - a|| и ||w - b|| (нормы градиентов imbalance : 1)

    Возвращает кривые отношения взвешенных норм и коэффициентов.
    """
    a = torch.randn(dim, generator=generator)
    b = torch.randn(dim, generator=generator) + 5.0
    w = torch.nn.Parameter(torch.zeros(dim))
    optimizer = torch.optim.SGD([w], lr=param_lr)
    balancer = GradNormBalancer([w], n_tasks=2, alpha=alpha, lr=lr)
    ratios, lambda_curve = [], []
    for _ in range(steps):
        losses = [imbalance * torch.linalg.vector_norm(w - a), torch.linalg.vector_norm(w - b)]
        norms = balancer.step(losses)
        weighted = balancer.lambdas * norms
        ratios.append(float(weighted[0] / weighted[1]))
        lambda_curve.append(float(balancer.lambdas[0]))
        total = sum(float(lam) * loss for lam, loss in zip(balancer.lambdas, losses))
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
    return {"norm_ratio": ratios, "lambda_1": lambda_curve}


# === Планировщик батчей ===

def plan_batches(
    manifest: Sequence[str],
    batch_size: int,
    accumulation_steps: int,
    rng: np.random.Generator,
    modalities: Optional[Sequence[str]] = None,
) -> BatchPlan:
    """
    Круговое чередование одномодальных батчей

    manifest - тег модальности каждого примера; пустые корзины пропускаются.
    """
    tags = list(modalities) if modalities is not None else list(dict.fromkeys(manifest))
    manifest = np.asarray(manifest)
    queues: List[Tuple[str, List[List[int]]]] = []
    for tag in tags:
        members = np.flatnonzero(manifest == tag)
        if members.size == 0:
            logger.warning(f"Modality bucket '{tag}' is empty; skipped")
            continue
        members = rng.permutation(members)
        queues.append((tag, [members[i:i + batch_size].tolist() for i in range(0, members.size, batch_size)]))
    plan = BatchPlan(accumulation_steps=accumulation_steps)
    cursor = 0
    while any(batches for _, batches in queues):
        tag, batches = queues[cursor % len(queues)]
        if batches:
            plan.batches.append((tag, batches.pop(0)))
        cursor += 1
    for tag, indices in plan.batches:
        if len(set(manifest[indices])) != 1:
            raise PlanViolationError(f"batch tagged '{tag}' mixes modalities")
    return plan


# === Сервис обучения ===

class TrainingService:
    """Цикл обучения денойзера (и, для сигнальной модальности, кодека)"""

    def __init__(
        self,
        model: TrainableDenoiser,
        schedule: PathSchedule,
        spec: TrainingSpec,
        generator: Optional[torch.Generator] = None,
    ):
        self.model = model
        self.schedule = schedule
        self.spec = spec
        self.codec: Optional[ToySignalCodec] = model.codec
        if spec.optimizer == "adam":
            self.optimizer = torch.optim.Adam(model.parameters(), lr=spec.lr)
        else:
            self.optimizer = torch.optim.SGD(model.parameters(), lr=spec.lr, momentum=spec.momentum)
        self.balancer: Optional[GradNormBalancer] = None
        if self.codec is not None:
            shared = list(self.codec.encoder.parameters()) + list(self.codec.projection.parameters())
            self.balancer = GradNormBalancer(shared, len(TASKS), spec.gradnorm_alpha, spec.gradnorm_lr, spec.gradnorm_every)
        self.micro_steps = 0
        self.optimizer_steps = 0
        self.examples_seen = 0
        self.dropped_seen = 0
        self.log_rows: List[Dict[str, float]] = []

    @property
    def lambdas(self) -> np.ndarray:
        return self.balancer.lambdas if self.balancer is not None else np.ones(len(TASKS))

    @property
    def drop_fraction(self) -> float:
        return self.dropped_seen / self.examples_seen if self.examples_seen else 0.0

    def corrupt(self, x1: np.ndarray, segments: np.ndarray, rng: np.random.Generator):
        """(x_t, времена, маска сброса условия) для пакета: t ~ U[0, 1] на пример"""
        B = x1.shape[0]
        times = rng.random(B)
        free = np.broadcast_to(segments == Segment.RESPONSE, x1.shape)
        x_t = sample_conditional_batch(self.schedule, x1, free, times, rng)
        dropped = rng.random(B) < self.spec.cfg_drop_prob
        n = int((segments == Segment.INSTRUCTION).sum())
        x_t[np.ix_(dropped, np.arange(n))] = self.model.drop_token_id
        return x_t, times, dropped

    def training_step(self, batch: TrainingBatch, rng: np.random.Generator) -> LossBreakdown:
        """Прямой/обратный проход микробатча; шаг оптимизатора - раз в accumulation_steps"""
        if len(set(batch.modality_tags)) != 1:
            raise PlanViolationError(f"batch mixes modalities: {sorted(set(batch.modality_tags))}")
        self.model.train()
        x_t, times, dropped = self.corrupt(batch.x1, batch.segments, rng)
        n = int((batch.segments == Segment.INSTRUCTION).sum())
        logits = self.model(torch.as_tensor(x_t), torch.as_tensor(times, dtype=torch.float32), n)
        l_ce = dfm_ce_loss(logits, torch.as_tensor(batch.x1), batch.segments)
        parts = [l_ce]
        if batch.points is not None and self.codec is not None:
            codec_losses = self.codec.losses(torch.as_tensor(batch.points, dtype=torch.float32))
            parts += [codec_losses["reconstruction"], codec_losses["commitment"]]

        grad_norms: Tuple[float, ...] = ()
        if len(parts) == len(TASKS) and self.balancer is not None:
            grad_norms = tuple(float(g) for g in self.balancer.step(parts))
        lambdas = self.lambdas
        overall = sum(float(lam) * part for lam, part in zip(lambdas, parts))
        if not torch.isfinite(overall):
            logger.error(f"Training diverged at micro-step {self.micro_steps}")
            raise DivergenceError(f"training loss is not finite at micro-step {self.micro_steps}")
        (overall / self.spec.accumulation_steps).backward()
        self.micro_steps += 1
        if self.micro_steps % self.spec.accumulation_steps == 0:
            self.optimizer.step()
            self.optimizer.zero_grad()
            self.optimizer_steps += 1

        self.examples_seen += len(dropped)
        self.dropped_seen += int(dropped.sum())
        values = [float(part.detach()) for part in parts] + [0.0] * (len(TASKS) - len(parts))
        breakdown = LossBreakdown(
            l_ce=values[0],
            l_rec_sig=values[1],
            l_rec_aux=values[2],
            lambdas=tuple(float(lam) for lam in lambdas),
            l_overall=float(lambdas[0] * values[0] + lambdas[1] * values[1] + lambdas[2] * values[2]),
            modality=batch.modality,
            dropped=int(dropped.sum()),
            grad_norms=grad_norms,
        )
        self._log(breakdown)
        return breakdown

    def _log(self, breakdown: LossBreakdown) -> None:
        row = {
            "step": float(self.micro_steps),
            "modality": breakdown.modality,
            "l_ce": breakdown.l_ce,
            "l_rec_sig": breakdown.l_rec_sig,
            "l_rec_aux": breakdown.l_rec_aux,
            "lambda_1": breakdown.lambdas[0],
            "lambda_2": breakdown.lambdas[1],
            "lambda_3": breakdown.lambdas[2],
            "grad_norms": ";".join(f"{g:.6g}" for g in breakdown.grad_norms),
        }
        self.log_rows.append(row)

    def fit(
        self,
        corpora: Dict[str, DfmCorpus],
        steps: int,
        rng: np.random.Generator,
        points: Optional[Dict[str, np.ndarray]] = None,
        on_step=None,
    ) -> List[LossBreakdown]:
        """
        steps микробатчей по плану чередования модальностей

        points - 2D-точки сигнальных примеров (для потерь реконструкции).
        """
        manifest: List[str] = []
        lookup: List[Tuple[str, int]] = []
        for tag, corpus in corpora.items():
            manifest += [tag] * corpus.size
            lookup += [(tag, i) for i in range(corpus.size)]
        history: List[LossBreakdown] = []
        while len(history) < steps:
            plan = plan_batches(manifest, self.spec.batch_size, self.spec.accumulation_steps, rng, list(corpora))
            for tag, indices in plan.batches:
                local = [lookup[i][1] for i in indices]
                corpus = corpora[tag]
                batch = TrainingBatch(
                    x1=corpus.sequences[local],
                    segments=corpus.segments,
                    modality_tags=[tag] * len(local),
                    points=points[tag][local] if points and tag in points else None,
                )
                history.append(self.training_step(batch, rng))
                if on_step is not None:
                    on_step(len(history), history[-1])
                if len(history) >= steps:
                    break
        logger.info(f"Training finished: {len(history)} micro-steps, last l_ce={history[-1].l_ce:.4f}")
        return history


def write_training_log(rows: List[Dict[str, float]], path: str) -> None:
    """CSV: step, modality, l_ce, l_rec_sig, l_rec_aux, λ1..λ3, grad_norms"""
    if not rows:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


# === Сравнение с оракулом ===

class OracleComparison(BaseModel):
    """Потери модели и оракула на одних и тех же (t, x_t, x1)"""
    model_ce: float
    oracle_ce: float
    oracle_entropy: float
    mean_kl: float


def compare_with_oracle(
    model: TrainableDenoiser,
    corpus: DfmCorpus,
    schedule: PathSchedule,
    n_samples: int,
    rng: np.random.Generator,
) -> OracleComparison:
    """
    Парное сравнение: CE модели, ожидаемая CE оракульного постериора,
    энтропия постериора и средний KL(оракул || модель) по позициям ответа
    """
    picks = rng.integers(0, corpus.size, size=n_samples)
    x1 = corpus.sequences[picks]
    times = rng.random(n_samples)
    free = np.broadcast_to(corpus.segments == Segment.RESPONSE, x1.shape)
    x_t = sample_conditional_batch(schedule, x1, free, times, rng)
    n = corpus.instruction_length
    response = corpus.segments == Segment.RESPONSE

    model.eval()
    with torch.no_grad():
        logits = model(torch.as_tensor(x_t), torch.as_tensor(times, dtype=torch.float32), n)
        model_log_probs = F.log_softmax(logits.double(), dim=-1).numpy()

    oracle_log_probs = np.empty_like(model_log_probs)
    for i in range(n_samples):
        q = corpus.targets[corpus.instruction_ids[picks[i]]]
        logit_rows, _ = oracle_posterior_batch(q, schedule, x_t[i:i + 1], corpus.segments, times[i])
        oracle_log_probs[i] = logit_rows[0] - np.log(np.exp(logit_rows[0]).sum(axis=-1, keepdims=True))

    rows = np.arange(n_samples)[:, None]
    cols = np.flatnonzero(response)[None, :]
    targets = x1[:, response]
    model_ce = float(-model_log_probs[rows, cols, targets].mean())
    oracle_ce = float(-oracle_log_probs[rows, cols, targets].mean())
    oracle_probs = np.exp(oracle_log_probs[:, response])
    entropy = float(-(oracle_probs * oracle_log_probs[:, response]).sum(-1).mean())
    kl = float((oracle_probs * (oracle_log_probs[:, response] - model_log_probs[:, response])).sum(-1).mean())
    model.train()
    return OracleComparison(model_ce=model_ce, oracle_ce=oracle_ce, oracle_entropy=entropy, mean_kl=max(kl, 0.0))
