"""
Мультикодбучная квантизация (MCQ) и игрушечная сигнальная модальность

Вектор z длины E делится на M кусков, каждый квантуется своим подкодбуком
(argmin евклидова расстояния, при равенстве - меньший индекс).
"""
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator
from safetensors import safe_open
from safetensors.torch import save_file
from torch import nn

from schemas import QuantizerSpec
from services.errors import DivergenceError, DomainError, SizeError

logger = logging.getLogger(__name__)

# Справочные размеры словарей модальностей (подкодбуки x записей)
REFERENCE_CODEBOOKS = {
    "full_vision": (4, 4096),
    "full_audio": (2, 2048),
    "desk_default": (4, 64),
    "desk_signal": (2, 16),
}


class Codebook(BaseModel):
    """Упорядоченный набор M подкодбуков, каждый K_m x (E/M)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sub_codebooks: List[np.ndarray]

    @model_validator(mode="after")
    def _check(self):
        self.sub_codebooks = [np.asarray(table, dtype=np.float64) for table in self.sub_codebooks]
        widths = {table.shape[1] for table in self.sub_codebooks}
        if len(widths) != 1:
            raise SizeError("all sub-codebooks must share the chunk width E/M")
        if not all(np.all(np.isfinite(table)) for table in self.sub_codebooks):
            raise ValueError("codebook vectors must be finite")
        return self

    @property
    def M(self) -> int:
        return len(self.sub_codebooks)

    @property
    def chunk(self) -> int:
        return int(self.sub_codebooks[0].shape[1])

    @property
    def E(self) -> int:
        return self.M * self.chunk

    @property
    def sizes(self) -> List[int]:
        return [int(table.shape[0]) for table in self.sub_codebooks]


class QuantizedCode(BaseModel):
    """Индексы по подкодбукам и представительный вектор (конкатенация)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    indices: np.ndarray
    representative: np.ndarray


# === Квантизация и lookup ===

def quantize_batch(codebook: Codebook, vectors: np.ndarray) -> np.ndarray:
    """Индексы N x M для N векторов"""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.shape[1] != codebook.E:
        raise SizeError(f"expected dimension {codebook.E}, got {vectors.shape[1]}")
    indices = np.empty((vectors.shape[0], codebook.M), dtype=np.int64)
    for m, table in enumerate(codebook.sub_codebooks):
        chunk = vectors[:, m * codebook.chunk:(m + 1) * codebook.chunk]
        # прямое вычитание, а не раскрытие квадрата: точные равенства остаются равенствами
        distances = ((chunk[:, None, :] - table[None, :, :]) ** 2).sum(axis=-1)
        indices[:, m] = np.argmin(distances, axis=1)
    return indices


def quantize(codebook: Codebook, z: np.ndarray) -> QuantizedCode:
    """z^q = argmin ||z - c|| по каждому подкодбуку"""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != codebook.E:
        raise SizeError(f"expected a vector of dimension {codebook.E}")
    indices = quantize_batch(codebook, z[None, :])[0]
    return QuantizedCode(indices=indices, representative=representative_lookup(codebook, indices))


def representative_lookup(codebook: Codebook, indices: Sequence[int]) -> np.ndarray:
    """Конкатенация выбранных подвекторов"""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape != (codebook.M,):
        raise SizeError(f"expected {codebook.M} indices")
    parts = []
    for m, (table, index) in enumerate(zip(codebook.sub_codebooks, indices)):
        if not 0 <= index < table.shape[0]:
            raise DomainError(f"index {index} out of range for sub-codebook {m}")
        parts.append(table[index])
    return np.concatenate(parts)


def project(representative: np.ndarray, projection: np.ndarray) -> np.ndarray:
    """Легкая линейная проекция P (H x E) в ширину модели"""
    if projection.shape[1] != representative.shape[0]:
        raise SizeError("projection width does not match representative dimension")
    return projection @ representative


def vq_losses(z: np.ndarray, code: QuantizedCode):
    """
    (codebook_loss, commitment_loss) = (||sg(z) - c||^2, ||z - sg(c)||^2)

    Как скаляры они равны; различается только маршрут градиентов
    (см. vq_losses_torch).
    """
    if z.shape != code.representative.shape:
        raise SizeError("z and representative must align")
    value = float(((z - code.representative) ** 2).sum())
    return value, value


def vq_losses_torch(z: torch.Tensor, z_q: torch.Tensor):
    """Версия для обучения: градиенты codebook_loss идут в код, commitment_loss - в энкодер"""
    codebook_loss = F.mse_loss(z_q, z.detach())
    commitment_loss = F.mse_loss(z, z_q.detach())
    return codebook_loss, commitment_loss


def distortion(codebook: Codebook, vectors: np.ndarray) -> float:
    """Средняя ||z - representative||"""
    indices = quantize_batch(codebook, vectors)
    reps = np.stack([representative_lookup(codebook, row) for row in indices])
    return float(np.linalg.norm(vectors - reps, axis=1).mean())


# === Токенизация модальности ===

def flatten_codes(indices: np.ndarray, sizes: Sequence[int], offset: int) -> np.ndarray:
    """(m, index) -> id токена: слот m берет id из своего диапазона"""
    starts = offset + np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    return np.asarray(indices, dtype=np.int64) + starts[None, :]


def unflatten_tokens(tokens: np.ndarray, sizes: Sequence[int], offset: int) -> np.ndarray:
    """id токена -> пары (m, index); каждый id соответствует ровно одной паре"""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    bounds = offset + np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    if tokens.size and (tokens.min() < bounds[0] or tokens.max() >= bounds[-1]):
        raise DomainError("token id outside the signal range")
    slots = np.searchsorted(bounds, tokens, side="right") - 1
    return np.stack([slots, tokens - bounds[slots]], axis=1)


# === Гауссовская смесь и k-means оракул ===

def gaussian_mixture_points(n_points: int, n_components: int, radius: float, std: float, rng: np.random.Generator):
    """Точки 2D-смеси с центрами на окружности; возвращает (points, labels)"""
    angles = 2 * np.pi * np.arange(n_components) / n_components
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = rng.integers(0, n_components, size=n_points)
    points = centers[labels] + std * rng.standard_normal((n_points, 2))
    return points, labels


def kmeans_oracle(points: np.ndarray, k: int, rng: np.random.Generator, iterations: int = 100):
    """Ллойд с k-means++ инициализацией; возвращает (центроиды, MSE реконструкции ближайшим центроидом)"""
    points = np.asarray(points, dtype=np.float64)
    k = min(k, points.shape[0])
    centroids = [points[rng.integers(points.shape[0])]]
    for _ in range(1, k):
        d2 = ((points[:, None, :] - np.array(centroids)[None]) ** 2).sum(-1).min(axis=1)
        total = d2.sum()
        probs = d2 / total if total > 0 else np.full(points.shape[0], 1.0 / points.shape[0])
        centroids.append(points[rng.choice(points.shape[0], p=probs)])
    centroids = np.array(centroids)
    for _ in range(iterations):
        assign = ((points[:, None, :] - centroids[None]) ** 2).sum(-1).argmin(axis=1)
        updated = centroids.copy()
        for j in range(k):
            members = points[assign == j]
            if len(members):
                updated[j] = members.mean(axis=0)
        if np.allclose(updated, centroids):
            break
        centroids = updated
    assign = ((points[:, None, :] - centroids[None]) ** 2).sum(-1).argmin(axis=1)
    mse = float(((points - centroids[assign]) ** 2).sum(axis=1).mean())
    return centroids, mse


def fit_codebook_kmeans(vectors: np.ndarray, n_codebooks: int, codebook_size: int, rng: np.random.Generator) -> Codebook:
    """MCQ-кодбук: k-means независимо по каждому куску"""
    vectors = np.atleast_2d(vectors)
    if vectors.shape[1] % n_codebooks:
        raise SizeError("dimension must be divisible by n_codebooks")
    chunk = vectors.shape[1] // n_codebooks
    tables = [
        kmeans_oracle(vectors[:, m * chunk:(m + 1) * chunk], codebook_size, rng)[0]
        for m in range(n_codebooks)
    ]
    return Codebook(sub_codebooks=tables)


# === Обучаемый кодек ===

class ToySignalCodec(nn.Module):
    """
    MLP-энкодер -> MCQ (EMA-кодбуки) -> проекция в ширину модели -> MLP-декодер

    Проекция разделяется с денойзером: ею же встраиваются сигнальные токены.
    """

    def __init__(self, spec: QuantizerSpec, model_width: int):
        super().__init__()
        self.spec = spec
        self.model_width = model_width
        self.M = spec.n_codebooks
        self.K_m = spec.codebook_size
        self.chunk = spec.embedding_dim // spec.n_codebooks
        self.encoder = nn.Sequential(
            nn.Linear(2, spec.hidden), nn.ReLU(), nn.Linear(spec.hidden, spec.embedding_dim)
        )
        self.projection = nn.Linear(spec.embedding_dim, model_width, bias=False)
        self.decoder = nn.Sequential(
            nn.Linear(model_width, spec.hidden), nn.ReLU(), nn.Linear(spec.hidden, 2)
        )
        self.register_buffer("codebooks", torch.zeros(self.M, self.K_m, self.chunk))
        self.register_buffer("ema_counts", torch.ones(self.M, self.K_m))
        self.register_buffer("ema_sums", torch.zeros(self.M, self.K_m, self.chunk))
        self.register_buffer("last_used", torch.zeros(self.M, self.K_m))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    @property
    def n_tokens(self) -> int:
        return self.M * self.K_m

    def _chunks(self, z: torch.Tensor) -> torch.Tensor:
        return z.view(z.shape[0], self.M, self.chunk)

    def quantize_tensor(self, z: torch.Tensor):
        """(индексы N x M, z_q N x E) без градиента"""
        chunks = self._chunks(z.detach())
        indices = torch.stack(
            [((chunks[:, m, None, :] - self.codebooks[m][None]) ** 2).sum(-1).argmin(dim=1) for m in range(self.M)],
            dim=1,
        )
        z_q = torch.stack([self.codebooks[m][indices[:, m]] for m in range(self.M)], dim=1)
        return indices, z_q.reshape(z.shape[0], -1)

    def init_codebooks(self, z: torch.Tensor, generator: torch.Generator) -> None:
        chunks = self._chunks(z.detach())
        picks = torch.randint(0, z.shape[0], (self.M, self.K_m), generator=generator)
        for m in range(self.M):
            self.codebooks[m] = chunks[picks[m], m]
        self.ema_sums.copy_(self.codebooks * self.ema_counts[..., None])
        self.initialized.fill_(True)

    @torch.no_grad()
    def ema_update(self, z: torch.Tensor, indices: torch.Tensor, step: int, generator: torch.Generator) -> int:
        """EMA-обновление кодбуков и возрождение мертвых кодов; возвращает число возрожденных"""
        decay = self.spec.ema_decay
        chunks = self._chunks(z.detach())
        revived = 0
        for m in range(self.M):
            onehot = F.one_hot(indices[:, m], self.K_m).to(z.dtype)
            counts = onehot.sum(0)
            sums = onehot.T @ chunks[:, m]
            self.ema_counts[m].mul_(decay).add_(counts, alpha=1 - decay)
            self.ema_sums[m].mul_(decay).add_(sums, alpha=1 - decay)
            total = self.ema_counts[m].sum()
            smoothed = (self.ema_counts[m] + 1e-5) / (total + self.K_m * 1e-5) * total
            self.codebooks[m] = self.ema_sums[m] / smoothed[:, None]
            self.last_used[m][counts > 0] = step
            dead = (step - self.last_used[m]) >= self.spec.dead_code_steps
            n_dead = int(dead.sum())
            if n_dead:
                picks = torch.randint(0, z.shape[0], (n_dead,), generator=generator)
                self.codebooks[m][dead] = chunks[picks, m]
                self.ema_sums[m][dead] = chunks[picks, m] * self.ema_counts[m][dead, None]
                self.last_used[m][dead] = step
                revived += n_dead
        return revived

    def forward(self, points: torch.Tensor) -> Dict[str, torch.Tensor]:
        z = self.encoder(points)
        indices, z_q = self.quantize_tensor(z)
        # straight-through: градиент декодера копируется в энкодер
        z_st = z + (z_q - z).detach()
        recon = self.decoder(self.projection(z_st))
        return {"z": z, "z_q": z_q, "indices": indices, "recon": recon}

    def losses(self, points: torch.Tensor, outputs: Optional[Dict[str, torch.Tensor]] = None) -> Dict[str, torch.Tensor]:
        """Реконструкция (l_rec_sig) и commitment (l_rec_aux)"""
        outputs = outputs if outputs is not None else self(points)
        reconstruction = F.mse_loss(outputs["recon"], points)
        _, commitment = vq_losses_torch(outputs["z"], outputs["z_q"])
        return {"reconstruction": reconstruction, "commitment": commitment}

    def token_vectors(self) -> torch.Tensor:
        """
        Векторы сигнальных токенов (M*K_m x E): подвектор в слоте своего куска

        Сумма векторов M токенов одной точки равна ее представительному вектору.
        """
        out = torch.zeros(self.M, self.K_m, self.M * self.chunk, dtype=self.codebooks.dtype)
        for m in range(self.M):
            out[m, :, m * self.chunk:(m + 1) * self.chunk] = self.codebooks[m]
        return out.reshape(self.n_tokens, -1).detach()

    def codebook(self) -> Codebook:
        return Codebook(sub_codebooks=[table.detach().double().numpy() for table in self.codebooks])

    @torch.no_grad()
    def encode_points(self, points: np.ndarray) -> np.ndarray:
        """Индексы N x M для точек"""
        z = self.encoder(torch.as_tensor(points, dtype=torch.float32))
        return self.quantize_tensor(z)[0].numpy()

    @torch.no_grad()
    def decode_indices(self, indices: np.ndarray) -> np.ndarray:
        idx = torch.as_tensor(indices, dtype=torch.long)
        z_q = torch.stack([self.codebooks[m][idx[:, m]] for m in range(self.M)], dim=1).reshape(idx.shape[0], -1)
        return self.decoder(self.projection(z_q)).numpy()


class FitResult(BaseModel):
    """Результат обучения игрушечной модальности"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    codec: ToySignalCodec
    reconstruction_mse: float
    usage_entropy: float
    revived_codes: int
    history: List[Dict[str, float]]


def usage_entropy(indices: np.ndarray, sizes: Sequence[int]) -> float:
    """Средняя по подкодбукам энтропия гистограммы использования кодов (nats)"""
    entropies = []
    for m, size in enumerate(sizes):
        counts = np.bincount(indices[:, m], minlength=size).astype(np.float64)
        probs = counts[counts > 0] / counts.sum()
        entropies.append(float(-(probs * np.log(probs)).sum()))
    return float(np.mean(entropies))


def fit_toy_modality(points: np.ndarray, spec: QuantizerSpec, model_width: int, generator: torch.Generator) -> FitResult:
    """
    Обучение энкодер -> MCQ -> декодер на 2D-точках

    Потери: MSE реконструкции + commitment_weight * commitment; кодбуки - EMA.
    """
    if len(points) == 0:
        raise ValueError("corpus must be nonempty")
    codec = ToySignalCodec(spec, model_width)
    data = torch.as_tensor(points, dtype=torch.float32)
    trainable = [p for name, p in codec.named_parameters()]
    optimizer = torch.optim.Adam(trainable, lr=spec.lr)
    history: List[Dict[str, float]] = []
    revived = 0
    with torch.no_grad():
        codec.init_codebooks(codec.encoder(data), generator)

    for step in range(1, spec.steps + 1):
        batch_idx = torch.randint(0, data.shape[0], (min(spec.batch_size, data.shape[0]),), generator=generator)
        batch = data[batch_idx]
        outputs = codec(batch)
        parts = codec.losses(batch, outputs)
        loss = parts["reconstruction"] + spec.commitment_weight * parts["commitment"]
        if not torch.isfinite(loss):
            logger.error(f"Codec training diverged at step {step}: last={history[-1] if history else None}")
            raise DivergenceError(f"codec loss is NaN at step {step} (history tail: {history[-3:]})")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        revived += codec.ema_update(outputs["z"], outputs["indices"], step, generator)
        if step % 50 == 0 or step == spec.steps:
            history.append({
                "step": float(step),
                "reconstruction": float(parts["reconstruction"]),
                "commitment": float(parts["commitment"]),
            })

    with torch.no_grad():
        outputs = codec(data)
        mse = float(((outputs["recon"] - data) ** 2).sum(dim=1).mean())
        entropy = usage_entropy(outputs["indices"].numpy(), [spec.codebook_size] * spec.n_codebooks)
    logger.info(f"Toy modality fitted: mse={mse:.4f} usage_entropy={entropy:.3f} revived={revived}")
    return FitResult(codec=codec, reconstruction_mse=mse, usage_entropy=entropy, revived_codes=revived, history=history)


# === Головы подкодбуков ===

def _matched_trunk(width: int, budget: int) -> nn.Module:
    """width -> r -> width с 2·width·r + r + width ≈ budget параметров"""
    if budget <= 0:
        return nn.Identity()
    rank = max(round((budget - width) / (2 * width + 1)), 1)
    return nn.Sequential(nn.Linear(width, rank), nn.GELU(), nn.Linear(rank, width))


class SubcodeHeads(nn.Module):
    """
    Предсказание M индексов подкодбуков по скрытому состоянию

    sequential - индекс m зависит от скрытого состояния и индексов < m
    (next-token внутри позиции); parallel - M независимых голов.
    """

    def __init__(self, mode: Literal["sequential", "parallel"], width: int, n_codebooks: int, codebook_size: int):
        super().__init__()
        self.mode = mode
        self.M = n_codebooks
        self.K_m = codebook_size
        self.heads = nn.ModuleList([nn.Linear(width, codebook_size) for _ in range(n_codebooks)])
        if mode == "sequential":
            self.prefix_embeddings = nn.ModuleList(
                [nn.Embedding(codebook_size, width) for _ in range(max(n_codebooks - 1, 0))]
            )
        else:
            # бутылочное горло, близкое по числу параметров к префиксным эмбеддингам
            self.trunk = _matched_trunk(width, (n_codebooks - 1) * codebook_size * width)

    def _slot_input(self, hidden: torch.Tensor, prefix: torch.Tensor, m: int) -> torch.Tensor:
        state = hidden
        for j in range(m):
            state = state + self.prefix_embeddings[j](prefix[:, j])
        return F.gelu(state)

    def forward(self, hidden: torch.Tensor, gold_prefix: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Логиты N x M x K_m; в sequential-режиме с teacher forcing по gold_prefix"""
        if self.mode == "parallel":
            shared = F.gelu(self.trunk(hidden))
            return torch.stack([head(shared) for head in self.heads], dim=1)
        if gold_prefix is None:
            raise ValueError("sequential heads need a prefix for teacher forcing; use decode()")
        return torch.stack(
            [self.heads[m](self._slot_input(hidden, gold_prefix, m)) for m in range(self.M)], dim=1
        )

    @torch.no_grad()
    def decode(self, hidden: torch.Tensor) -> torch.Tensor:
        """Жадное декодирование N x M индексов"""
        if self.mode == "parallel":
            return self(hidden).argmax(dim=-1)
        picked = torch.zeros(hidden.shape[0], self.M, dtype=torch.long)
        for m in range(self.M):
            picked[:, m] = self.heads[m](self._slot_input(hidden, picked, m)).argmax(dim=-1)
        return picked


def decode_subcodes(head_mode: str, hidden_state: torch.Tensor, heads: SubcodeHeads) -> np.ndarray:
    """M индексов для одного скрытого состояния ширины H"""
    if heads.mode != head_mode:
        raise ValueError(f"heads were built for mode '{heads.mode}', not '{head_mode}'")
    hidden = hidden_state.reshape(1, -1).float()
    return heads.decode(hidden)[0].numpy()


def compare_head_modes(
    indices: np.ndarray,
    features: np.ndarray,
    codebook_size: int,
    generator: torch.Generator,
    steps: int = 400,
    lr: float = 3e-3,
) -> Dict[str, float]:
    """
    Парная оценка sequential vs parallel: обучение на 80%, точность по слотам на 20%

    Направление разницы не утверждается - только измеряется.
    """
    n = indices.shape[0]
    split = int(0.8 * n)
    x = torch.as_tensor(features, dtype=torch.float32)
    y = torch.as_tensor(indices, dtype=torch.long)
    report: Dict[str, float] = {}
    for mode in ("sequential", "parallel"):
        heads = SubcodeHeads(mode, x.shape[1], indices.shape[1], codebook_size)
        optimizer = torch.optim.Adam(heads.parameters(), lr=lr)
        for _ in range(steps):
            batch = torch.randint(0, split, (min(128, split),), generator=generator)
            logits = heads(x[batch], y[batch]) if mode == "sequential" else heads(x[batch])
            loss = F.cross_entropy(logits.reshape(-1, codebook_size), y[batch].reshape(-1))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        predicted = heads.decode(x[split:])
        report[f"{mode}_slot_accuracy"] = float((predicted == y[split:]).float().mean())
        report[f"{mode}_params"] = float(sum(p.numel() for p in heads.parameters()))
    report["param_ratio"] = report["parallel_params"] / report["sequential_params"]
    return report


# === Сохранение кодека ===

def save_codec(codec: ToySignalCodec, path: str) -> None:
    """Кодек в safetensors; QuantizerSpec и ширина модели - в метаданных"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tensors = {
        name: tensor.detach().to(torch.float32).contiguous()
        for name, tensor in codec.state_dict().items()
        if tensor.dtype.is_floating_point
    }
    metadata = {"quantizer": codec.spec.model_dump_json(), "model_width": str(codec.model_width)}
    save_file(tensors, path, metadata=metadata)
    logger.info(f"Codec saved: {path}")


def load_codec(path: str) -> ToySignalCodec:
    with safe_open(path, framework="pt") as handle:
        metadata = handle.metadata()
        tensors = {name: handle.get_tensor(name) for name in handle.keys()}
    codec = ToySignalCodec(QuantizerSpec.model_validate_json(metadata["quantizer"]), int(metadata["model_width"]))
    missing, unexpected = codec.load_state_dict(tensors, strict=False)
    if unexpected or any(not name.endswith("initialized") for name in missing):
        raise SizeError(f"codec file does not match: missing={missing} unexpected={unexpected}")
    codec.initialized.fill_(True)
    return codec
