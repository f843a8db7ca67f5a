"""
Денойзер p_{1|t}(x1 | x_t)

Два источника логитов:
- oracle_posterior - точный байесовский постериор для перечислимого q
- TrainableDenoiser - маленький двунаправленный трансформер со сдвигом логитов
  на одну позицию (слот i-1 предсказывает позицию i, позицию 0 - обучаемый BOS)

Прямой проход идет по двум спанам: инструкция и ответ. При
isolate_instruction запросы инструкции видят только ключи инструкции, поэтому
признаки инструкции не зависят ни от ответа, ни от времени (кэшируются точно).
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from safetensors import safe_open
from safetensors.torch import save_file
from scipy.special import logsumexp
from torch import nn

from config import config
from schemas import ModelSpec, QuantizerSpec
from services.errors import PreconditionError, SizeError
from services.paths import PathSchedule, Segment, SequenceDistribution, TokenSequence, conditional_table
from services.quantizer import ToySignalCodec

logger = logging.getLogger(__name__)

LOGIT_FLOOR = 1e-300


class DenoiserOutput(BaseModel):
    """Логиты D x K (или B x D x K) и признаки по слоям"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    logits: np.ndarray
    hidden_features: List[np.ndarray] = Field(default_factory=list)
    value_features: List[np.ndarray] = Field(default_factory=list)
    zero_likelihood: bool = False

    def probabilities(self) -> np.ndarray:
        shifted = self.logits - self.logits.max(axis=-1, keepdims=True)
        weights = np.exp(shifted)
        return weights / weights.sum(axis=-1, keepdims=True)


class Denoiser(Protocol):
    """Пакетный денойзер, которым пользуется сэмплер"""
    vocab_size: int

    def __call__(self, tokens: np.ndarray, segments: np.ndarray, t: float, condition_dropped: bool = False) -> np.ndarray:
        ...


# === Оракул ===

def _support_log_likelihood(log_table: np.ndarray, tokens: np.ndarray, segments: np.ndarray, support: np.ndarray) -> np.ndarray:
    """
    log Π_j p_t(x_t^j | x1^j) для каждого элемента носителя: B x S

    Инструкция и Pad не шумятся: там правдоподобие - индикатор совпадения.
    """
    free = segments == Segment.RESPONSE
    noisy = log_table[tokens[:, None, :], support[None, :, :]]  # B x S x D
    exact = np.where(tokens[:, None, :] == support[None, :, :], 0.0, -np.inf)
    return np.where(free[None, None, :], noisy, exact).sum(axis=-1)


def oracle_posterior_batch(
    q: SequenceDistribution,
    schedule: PathSchedule,
    tokens: np.ndarray,
    segments: np.ndarray,
    t: float,
):
    """Постериор для B последовательностей: (логиты B x D x K, флаги нулевого правдоподобия B)"""
    if q.support.shape[0] > config.POSTERIOR_SUPPORT_CAP:
        raise SizeError(f"support size {q.support.shape[0]} exceeds cap {config.POSTERIOR_SUPPORT_CAP}")
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[1] != q.length:
        raise SizeError("x_t length differs from the support sequences")
    K = schedule.vocab_size
    with np.errstate(divide="ignore"):
        log_table = np.log(conditional_table(schedule, t))
        log_weights = _support_log_likelihood(log_table, tokens, segments, q.support) + np.log(q.weights)[None, :]
    norm = logsumexp(log_weights, axis=1, keepdims=True)
    degenerate = ~np.isfinite(norm[:, 0])
    posterior = np.exp(log_weights - np.where(np.isfinite(norm), norm, 0.0))
    onehot = np.eye(K)[q.support]  # S x D x K
    probs = np.einsum("bs,sdk->bdk", posterior, onehot)
    if degenerate.any():
        logger.warning(f"Zero total likelihood for {int(degenerate.sum())} sequence(s) at t={t:.4f}; using uniform posterior")
        probs[degenerate] = 1.0 / K
    return np.log(np.maximum(probs, LOGIT_FLOOR)), degenerate


def oracle_posterior(q: SequenceDistribution, schedule: PathSchedule, x_t: TokenSequence, t: float) -> DenoiserOutput:
    """Точный p_{1|t}(. | x_t) по формуле Байеса (признаки пустые)"""
    logits, degenerate = oracle_posterior_batch(q, schedule, x_t.tokens[None, :], x_t.segments, t)
    return DenoiserOutput(logits=logits[0], zero_likelihood=bool(degenerate[0]))


class OracleDenoiser:
    """Оракул как пакетный денойзер; флаг condition_dropped игнорируется"""

    def __init__(self, q: SequenceDistribution, schedule: PathSchedule):
        self.q = q
        self.schedule = schedule
        self.vocab_size = schedule.vocab_size

    def __call__(self, tokens, segments, t, condition_dropped=False):
        return oracle_posterior_batch(self.q, self.schedule, tokens, segments, t)[0]


# === Обучаемый денойзер ===

def sinusoidal_time_features(t: torch.Tensor, width: int) -> torch.Tensor:
    """Синусоидальное кодирование времени: B -> B x width"""
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    angles = 1000.0 * t.float()[:, None] * freqs[None, :]
    features = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if features.shape[1] < width:
        features = F.pad(features, (0, width - features.shape[1]))
    return features


class DenoiserBlock(nn.Module):
    """Pre-LN блок: внимание без маски причинности + MLP"""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm_attn = nn.LayerNorm(width)
        self.query = nn.Linear(width, width)
        self.key = nn.Linear(width, width)
        self.value = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.norm_mlp = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def project(self, hidden: torch.Tensor):
        normed = self.norm_attn(hidden)
        return self.query(normed), self.key(normed), self.value(normed)

    def attend(self, queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor, hidden: torch.Tensor) -> torch.Tensor:
        """Новые скрытые состояния строк `hidden` по ключам/значениям всей видимой области"""
        B, R, H = queries.shape
        head_dim = H // self.heads

        def split(x):
            return x.view(B, x.shape[1], self.heads, head_dim).transpose(1, 2)

        scores = split(queries) @ split(keys).transpose(-1, -2) / math.sqrt(head_dim)
        mixed = (scores.softmax(dim=-1) @ split(values)).transpose(1, 2).reshape(B, R, H)
        hidden = hidden + self.out(mixed)
        return hidden + self.mlp(self.norm_mlp(hidden))


@dataclass
class EncodedSequence:
    """Результат прохода: финальные скрытые и K/V по слоям (все B x D x H)"""
    final_hidden: torch.Tensor
    layer_hidden: List[torch.Tensor]
    layer_keys: List[torch.Tensor]
    layer_values: List[torch.Tensor]


class TrainableDenoiser(nn.Module):
    """
    Двунаправленный денойзер с условием по времени

    Раскладка словаря: [0, signal_offset) - текст и спецтокены (PAD, EOS, DROP),
    [signal_offset, K) - сигнальные токены кодека (если он привязан).
    """

    def __init__(
        self,
        spec: ModelSpec,
        vocab_size: int,
        drop_token_id: int,
        codec: Optional[ToySignalCodec] = None,
        eos_id: int = 1,
    ):
        super().__init__()
        self.spec = spec
        self.vocab_size = vocab_size
        self.drop_token_id = drop_token_id
        self.eos_id = eos_id
        self.codec = codec
        self.signal_offset = vocab_size - codec.n_tokens if codec is not None else vocab_size
        if self.signal_offset <= drop_token_id:
            raise SizeError("text vocabulary must hold the condition-drop token")
        width = spec.width
        self.token_embedding = nn.Embedding(vocab_size, width)
        self.position_embedding = nn.Embedding(spec.max_len, width) if spec.use_position_embeddings else None
        self.time_projection = nn.Linear(width, width)
        nn.init.normal_(self.time_projection.weight, std=0.02)
        nn.init.zeros_(self.time_projection.bias)
        self.bos_state = nn.Parameter(0.02 * torch.randn(width))
        self.blocks = nn.ModuleList([DenoiserBlock(width, spec.heads) for _ in range(spec.layers)])
        self.final_norm = nn.LayerNorm(width)
        # раздельные головы модальностей: текст и сигнальные токены
        self.text_head = nn.Linear(width, self.signal_offset)
        self.signal_head = nn.Linear(width, codec.n_tokens) if codec is not None else None

    def frozen_length(self, instruction_length: int) -> int:
        """
        Длина префикса, признаки которого не зависят от ответа и от t

        Последний слот инструкции предсказывает первую позицию ответа
        (сдвиг логитов), поэтому он видит всю последовательность и время.
        """
        if not self.spec.isolate_instruction:
            return 0
        return max(instruction_length - 1, 0)

    # --- входные эмбеддинги ---

    def embed(self, tokens: torch.Tensor, t: torch.Tensor, instruction_length: int) -> torch.Tensor:
        """Эмбеддинги B x D x H: токен + позиция + время (на ответе и слоте перед ним)"""
        B, D = tokens.shape
        if D > self.spec.max_len:
            raise SizeError(f"sequence length {D} exceeds model maximum {self.spec.max_len}")
        hidden = self.token_embedding(tokens)
        if self.codec is not None:
            is_signal = tokens >= self.signal_offset
            if bool(is_signal.any()):
                vectors = self.codec.projection(self.codec.token_vectors())
                index = (tokens - self.signal_offset).clamp(min=0)
                hidden = torch.where(is_signal[..., None], vectors[index], hidden)
        if self.position_embedding is not None:
            hidden = hidden + self.position_embedding(torch.arange(D))[None]
        time = self.time_projection(sinusoidal_time_features(t, self.spec.width).to(hidden.dtype))[:, None, :]
        if self.spec.time_on_instruction:
            return hidden + time
        mask = torch.zeros(1, D, 1, dtype=hidden.dtype)
        mask[:, max(instruction_length - 1, 0):] = 1.0
        return hidden + mask * time

    # --- стек ---

    def encode(self, tokens: torch.Tensor, t: torch.Tensor, instruction_length: int) -> EncodedSequence:
        """
        Полный (некэшированный) проход

        Замороженный префикс (frozen_length) смотрит только на себя, остальные
        слоты - на всю последовательность.
        """
        hidden = self.embed(tokens, t, instruction_length)
        s = self.frozen_length(instruction_length)
        h_frozen, h_live = hidden[:, :s], hidden[:, s:]
        layer_hidden, layer_keys, layer_values = [], [], []
        for block in self.blocks:
            q_f, k_f, v_f = block.project(h_frozen)
            q_l, k_l, v_l = block.project(h_live)
            keys = torch.cat([k_f, k_l], dim=1)
            values = torch.cat([v_f, v_l], dim=1)
            layer_keys.append(keys)
            layer_values.append(values)
            if s:
                h_frozen = block.attend(q_f, k_f, v_f, h_frozen)
            h_live = block.attend(q_l, keys, values, h_live)
            layer_hidden.append(torch.cat([h_frozen, h_live], dim=1))
        return EncodedSequence(
            final_hidden=layer_hidden[-1],
            layer_hidden=layer_hidden,
            layer_keys=layer_keys,
            layer_values=layer_values,
        )

    def logits_from_hidden(self, final_hidden: torch.Tensor) -> torch.Tensor:
        """Сдвиг на одну позицию: логиты позиции i - из слота i-1, позиции 0 - из BOS"""
        B = final_hidden.shape[0]
        bos = self.bos_state[None, None, :].expand(B, 1, -1)
        shifted = torch.cat([bos, final_hidden[:, :-1]], dim=1)
        normed = self.final_norm(shifted)
        logits = self.text_head(normed)
        if self.signal_head is not None:
            logits = torch.cat([logits, self.signal_head(normed)], dim=-1)
        return logits

    def forward(self, tokens: torch.Tensor, t: torch.Tensor, instruction_length: int) -> torch.Tensor:
        return self.logits_from_hidden(self.encode(tokens, t, instruction_length).final_hidden)

    def drop_condition(self, tokens: torch.Tensor, instruction_length: int) -> torch.Tensor:
        """Замена токенов инструкции на токен сброса условия"""
        dropped = tokens.clone()
        dropped[:, :instruction_length] = self.drop_token_id
        return dropped

    def architecture(self) -> dict:
        return {
            "model": self.spec.model_dump(),
            "vocab_size": self.vocab_size,
            "drop_token_id": self.drop_token_id,
            "eos_id": self.eos_id,
            "quantizer": self.codec.spec.model_dump() if self.codec is not None else None,
        }


def instruction_length_of(segments: np.ndarray) -> int:
    return TokenSequence(tokens=np.zeros(len(segments), dtype=np.int64), segments=segments).instruction_length


def forward(model: TrainableDenoiser, x_t: TokenSequence, t: float, condition_dropped: bool = False) -> DenoiserOutput:
    """Один проход модели с признаками по слоям (hidden - выходы слоев, value - V слоев)"""
    n = x_t.instruction_length
    tokens = torch.as_tensor(x_t.tokens, dtype=torch.long)[None]
    if condition_dropped:
        tokens = model.drop_condition(tokens, n)
    with torch.no_grad():
        encoded = model.encode(tokens, torch.tensor([float(t)]), n)
        logits = model.logits_from_hidden(encoded.final_hidden)
    return DenoiserOutput(
        logits=logits[0].double().numpy(),
        hidden_features=[h[0].double().numpy() for h in encoded.layer_hidden],
        value_features=[v[0].double().numpy() for v in encoded.layer_values],
    )


class ModelDenoiser:
    """Обучаемая модель как пакетный денойзер сэмплера"""

    def __init__(self, model: TrainableDenoiser):
        self.model = model
        self.vocab_size = model.vocab_size

    def __call__(self, tokens, segments, t, condition_dropped=False):
        n = instruction_length_of(segments)
        batch = torch.as_tensor(tokens, dtype=torch.long)
        if condition_dropped:
            batch = self.model.drop_condition(batch, n)
        with torch.no_grad():
            logits = self.model(batch, torch.full((batch.shape[0],), float(t)), n)
        return logits.double().numpy()


def extract_retrieval_feature(model: TrainableDenoiser, sequence: TokenSequence) -> np.ndarray:
    """Признак последнего слоя на последнем <EOS>, нормированный к единичной длине"""
    eos = np.flatnonzero(sequence.tokens == model.eos_id)
    if eos.size == 0:
        raise PreconditionError("sequence has no EOS token")
    n = sequence.instruction_length
    tokens = torch.as_tensor(sequence.tokens, dtype=torch.long)[None]
    with torch.no_grad():
        hidden = model.encode(tokens, torch.tensor([1.0]), n).final_hidden[0, eos[-1]]
    feature = hidden.double().numpy()
    return feature / np.linalg.norm(feature)


def retrieval_features_torch(model: TrainableDenoiser, tokens: torch.Tensor, eos_positions: torch.Tensor) -> torch.Tensor:
    """Дифференцируемые признаки <EOS> для пакета (вся последовательность - инструкция)"""
    hidden = model.encode(tokens, torch.ones(tokens.shape[0]), tokens.shape[1]).final_hidden
    picked = hidden[torch.arange(tokens.shape[0]), eos_positions]
    return F.normalize(picked, dim=-1)


# === Чекпоинты ===

def save_checkpoint(model: TrainableDenoiser, path: str) -> None:
    """Плоский набор именованных float32-тензоров + JSON-описание архитектуры в заголовке"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tensors = {
        name: tensor.detach().to(torch.float32).contiguous()
        for name, tensor in model.state_dict().items()
        if tensor.dtype.is_floating_point
    }
    save_file(tensors, path, metadata={"architecture": json.dumps(model.architecture(), sort_keys=True)})
    logger.info(f"Checkpoint saved: {path} ({len(tensors)} tensors)")


def load_checkpoint(path: str) -> TrainableDenoiser:
    with safe_open(path, framework="pt") as handle:
        architecture = json.loads(handle.metadata()["architecture"])
        tensors = {name: handle.get_tensor(name) for name in handle.keys()}
    codec = None
    if architecture.get("quantizer"):
        spec = ModelSpec.model_validate(architecture["model"])
        codec = ToySignalCodec(QuantizerSpec.model_validate(architecture["quantizer"]), spec.width)
        codec.initialized.fill_(True)
    model = TrainableDenoiser(
        ModelSpec.model_validate(architecture["model"]),
        vocab_size=architecture["vocab_size"],
        drop_token_id=architecture["drop_token_id"],
        codec=codec,
        eos_id=architecture.get("eos_id", 1),
    )
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    # нечисловые буферы (флаг инициализации кодека) в чекпоинт не попадают
    if unexpected or any(not name.endswith("initialized") for name in missing):
        raise SizeError(f"checkpoint does not match architecture: missing={missing} unexpected={unexpected}")
    logger.info(f"Checkpoint loaded: {path}")
    return model
