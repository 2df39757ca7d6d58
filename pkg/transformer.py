"""
Базовая архитектура Transformer: SAN-энкодер, SAN-декодер с кросс-вниманием
и выходная проекция W_o·tanh(W_w·H)
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from config import MAX_SEQ_LEN, VARIANTS
from errors import ConfigError, InputError
from tensor import (
    Tensor,
    add_mask_bias,
    dropout,
    embedding_lookup,
    layer_norm,
    relu,
    softmax,
    tanh,
    transpose,
)


logger = logging.getLogger(__name__)

MODES = ("train", "eval")


@dataclass
class ModelConfig:
    """Размерности модели; по умолчанию настольный масштаб 64/128/2/2"""
    src_vocab_size: int
    tgt_vocab_size: int
    d_model: int = 64
    d_ffn: int = 128
    n_heads: int = 2
    n_layers: int = 2
    dropout: float = 0.1
    max_len: int = MAX_SEQ_LEN
    ln_eps: float = 1e-5
    use_positions: bool = True
    tie_output_embedding: bool = False
    # Опции ячейки future cost
    future_bias: bool = False
    separate_future_embedding: bool = False
    future_dropout: bool = False

    def validate(self) -> None:
        for name in ("src_vocab_size", "tgt_vocab_size", "d_model", "d_ffn", "n_heads", "n_layers", "max_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.max_len > MAX_SEQ_LEN:
            raise ConfigError(f"max_len {self.max_len} exceeds the supported maximum {MAX_SEQ_LEN}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


class ModelParams:
    """
    Все обучаемые матрицы модели по именам.

    Имена: src_embedding, tgt_embedding, enc.{l}.*, dec.{l}.*, out.W_w, out.W_o,
    future.* (только для model1/model2).
    """

    def __init__(self, config: ModelConfig, variant: str, tensors: Dict[str, Tensor], seed: int = 0):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{variant}'")
        self.config = config
        self.variant = variant
        self.tensors = tensors
        self.seed = seed
        # генератор масок dropout; его состояние сохраняется в чекпоинте
        self.rng = np.random.default_rng([seed, 2])

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> List[str]:
        return list(self.tensors)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    @property
    def has_future(self) -> bool:
        return any(name.startswith("future.") for name in self.tensors)

    def future_names(self) -> List[str]:
        return [name for name in self.tensors if name.startswith("future.")]

    def shared_names(self) -> List[str]:
        return [name for name in self.tensors if not name.startswith("future.")]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = np.zeros_like(t.data)

    def count_parameters(self) -> Dict[str, int]:
        shared = sum(self.tensors[n].size for n in self.shared_names())
        future = sum(self.tensors[n].size for n in self.future_names())
        return {"shared": shared, "future": future, "total": shared + future}

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            self.tensors[name].data[...] = arr

    def copy(self) -> "ModelParams":
        clone = ModelParams(
            self.config,
            self.variant,
            {name: Tensor(t.data.copy(), requires_grad=True, name=name) for name, t in self.tensors.items()},
            self.seed,
        )
        clone.rng.bit_generator.state = self.rng.bit_generator.state
        return clone


# ===== Инициализация =====

def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def shared_param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Формы параметров базовой модели в фиксированном порядке"""
    d, f = config.d_model, config.d_ffn
    shapes = {
        "src_embedding": (config.src_vocab_size, d),
        "tgt_embedding": (config.tgt_vocab_size, d),
    }

    def attention(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{w}"] = (d, d)

    def norm(prefix):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for layer in range(config.n_layers):
        attention(f"enc.{layer}.self_attn")
        norm(f"enc.{layer}.ln1")
        ffn(f"enc.{layer}.ffn")
        norm(f"enc.{layer}.ln2")
    for layer in range(config.n_layers):
        attention(f"dec.{layer}.self_attn")
        norm(f"dec.{layer}.ln1")
        attention(f"dec.{layer}.cross_attn")
        norm(f"dec.{layer}.ln2")
        ffn(f"dec.{layer}.ffn")
        norm(f"dec.{layer}.ln3")
    shapes["out.W_w"] = (d, d)
    if not config.tie_output_embedding:
        shapes["out.W_o"] = (d, config.tgt_vocab_size)
    return shapes


def init_array(name: str, shape: Tuple[int, ...], d_model: int, rng: np.random.Generator) -> np.ndarray:
    if name.endswith("embedding"):
        return rng.normal(0.0, d_model ** -0.5, size=shape)
    if name.endswith(".gain"):
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    return _xavier(rng, shape[0], shape[1])


def param_shapes(config: ModelConfig, variant: str) -> Dict[str, Tuple[int, ...]]:
    from futurecost import future_param_shapes

    shapes = shared_param_shapes(config)
    if variant != "baseline":
        shapes.update(future_param_shapes(config, variant))
    return shapes


def init_model_params(config: ModelConfig, variant: str, seed: int) -> ModelParams:
    """
    Создаёт параметры модели.

    Общие параметры берутся из генератора seed, параметры future cost - из
    отдельного потока, поэтому baseline и model1 с одинаковым seed получают
    побитово одинаковые общие веса.
    """
    from futurecost import future_param_shapes

    config.validate()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{variant}'")

    tensors: Dict[str, Tensor] = {}
    shared_rng = np.random.default_rng(seed)
    for name, shape in shared_param_shapes(config).items():
        tensors[name] = Tensor(init_array(name, shape, config.d_model, shared_rng), requires_grad=True, name=name)
    if variant != "baseline":
        future_rng = np.random.default_rng([seed, 1])
        for name, shape in future_param_shapes(config, variant).items():
            tensors[name] = Tensor(init_array(name, shape, config.d_model, future_rng), requires_grad=True, name=name)

    params = ModelParams(config, variant, tensors, seed)
    counts = params.count_parameters()
    logger.info(f"Initialized {variant}: {counts['total']} parameters ({counts['future']} in the future-cost cell)")
    return params


# ===== Блоки =====

def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    positions = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: d_model // 2])
    return table


def causal_mask(length: int) -> np.ndarray:
    """Маска [I, I]: True строго выше диагонали (I(I−1)/2 запретов)"""
    if length < 1:
        raise InputError(f"causal mask length must be >= 1, got {length}")
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def multi_head_attention(
    query_in: Tensor,
    memory: Tensor,
    blocked: np.ndarray,
    prefix: str,
    params: ModelParams,
    mode: str,
) -> Tuple[Tensor, Tensor]:
    """
    Масштабированное скалярное внимание с несколькими головами.

    Args:
        query_in: [B, I, d]
        memory: [B, J, d]
        blocked: Булева маска, транслируемая к [B, h, I, J]
        prefix: Префикс имён параметров (например "dec.0.cross_attn")
        params: Параметры модели
        mode: train / eval

    Returns:
        (выход [B, I, d], веса внимания [B, h, I, J])
    """
    config = params.config
    batch, length, d = query_in.shape
    mem_length = memory.shape[1]
    heads = config.n_heads
    d_head = d // heads

    def split(x: Tensor, n: int) -> Tensor:
        return transpose(x.reshape(batch, n, heads, d_head), (0, 2, 1, 3))

    q = split(query_in @ params[f"{prefix}.wq"], length)
    k = split(memory @ params[f"{prefix}.wk"], mem_length)
    v = split(memory @ params[f"{prefix}.wv"], mem_length)

    scores = (q @ transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d_head))
    scores = add_mask_bias(scores, blocked)
    weights = softmax(scores, axis=-1)
    attended = dropout(weights, config.dropout, params.rng, mode == "train")
    context = transpose(attended @ v, (0, 2, 1, 3)).reshape(batch, length, d)
    return context @ params[f"{prefix}.wo"], weights


def feed_forward(x: Tensor, prefix: str, params: ModelParams, mode: str) -> Tensor:
    hidden = relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    hidden = dropout(hidden, params.config.dropout, params.rng, mode == "train")
    return hidden @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def _residual_norm(x: Tensor, sublayer_out: Tensor, prefix: str, params: ModelParams, mode: str) -> Tensor:
    sublayer_out = dropout(sublayer_out, params.config.dropout, params.rng, mode == "train")
    return layer_norm(sublayer_out + x, params[f"{prefix}.gain"], params[f"{prefix}.bias"], params.config.ln_eps)


def _embed(ids: np.ndarray, table: str, params: ModelParams, mode: str, limit: int) -> Tensor:
    config = params.config
    length = ids.shape[1]
    if length > limit:
        raise InputError(f"sequence length {length} exceeds {limit} positions (max_len {config.max_len})")
    x = embedding_lookup(params[table], ids) * math.sqrt(config.d_model)
    if config.use_positions:
        x = x + Tensor(sinusoidal_positions(length, config.d_model))
    return dropout(x, config.dropout, params.rng, mode == "train")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got '{mode}'")


# ===== Операции модели =====

def encode(src_ids: np.ndarray, src_pad_mask: np.ndarray, params: ModelParams, mode: str = "eval") -> Tensor:
    """
    Энкодер: N раз C = LN(SelfATT(H) + H), H = LN(FFN(C) + C).

    Args:
        src_ids: [B, J] идентификаторы источника
        src_pad_mask: [B, J], True в PAD-позициях
        params: Параметры модели
        mode: train включает dropout

    Returns:
        H_e^N: [B, J, d_model]
    """
    _check_mode(mode)
    src_ids = np.asarray(src_ids)
    h = _embed(src_ids, "src_embedding", params, mode, params.config.max_len)
    blocked = np.asarray(src_pad_mask, dtype=bool)[:, None, None, :]
    for layer in range(params.config.n_layers):
        prefix = f"enc.{layer}"
        attended, _ = multi_head_attention(h, h, blocked, f"{prefix}.self_attn", params, mode)
        c = _residual_norm(h, attended, f"{prefix}.ln1", params, mode)
        h = _residual_norm(c, feed_forward(c, f"{prefix}.ffn", params, mode), f"{prefix}.ln2", params, mode)
    return h


def decode(
    tgt_in_ids: np.ndarray,
    encoder_out: Tensor,
    src_pad_mask: np.ndarray,
    causal: np.ndarray,
    params: ModelParams,
    mode: str = "eval",
) -> Tensor:
    """
    Декодер: маскированное самовнимание, кросс-внимание к H_e^N и FFN,
    каждый подслой с residual + LN.

    Returns:
        H^N: [B, I, d_model]
    """
    _check_mode(mode)
    tgt_in_ids = np.asarray(tgt_in_ids)
    # BOS + max_len слов
    h = _embed(tgt_in_ids, "tgt_embedding", params, mode, params.config.max_len + 1)
    self_blocked = np.asarray(causal, dtype=bool)[None, None, :, :]
    cross_blocked = np.asarray(src_pad_mask, dtype=bool)[:, None, None, :]
    for layer in range(params.config.n_layers):
        prefix = f"dec.{layer}"
        attended, _ = multi_head_attention(h, h, self_blocked, f"{prefix}.self_attn", params, mode)
        c = _residual_norm(h, attended, f"{prefix}.ln1", params, mode)
        crossed, _ = multi_head_attention(c, encoder_out, cross_blocked, f"{prefix}.cross_attn", params, mode)
        d = _residual_norm(c, crossed, f"{prefix}.ln2", params, mode)
        h = _residual_norm(d, feed_forward(d, f"{prefix}.ffn", params, mode), f"{prefix}.ln3", params, mode)
    return h


def output_projection(params: ModelParams) -> Tensor:
    if params.config.tie_output_embedding:
        return transpose(params["tgt_embedding"], (1, 0))
    return params["out.W_o"]


def output_logits(hidden: Tensor, params: ModelParams) -> Tensor:
    """Логиты перевода: W_o·tanh(W_w·H), без смещений"""
    return tanh(hidden @ params["out.W_w"]) @ output_projection(params)
