"""
Механизм future cost: гейтовая ячейка будущего контекста, инициализация F₀,
голова распределения следующего слова и гейт слияния Model II
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Tuple, Union

import numpy as np

from config import EOS_ID
from errors import InputError
from tensor import Tensor, concat, dropout, embedding_lookup, interpolate, relu, sigmoid, tanh

if TYPE_CHECKING:
    from transformer import ModelConfig, ModelParams


logger = logging.getLogger(__name__)

CELL_MATRICES = ("W_r", "U_r", "W_z", "U_z", "W", "U")


@dataclass
class FutureState:
    """Представление будущего контекста F_i на текущем шаге, [B, d_model]"""
    F: Tensor

    @property
    def batch_size(self) -> int:
        return self.F.shape[0]

    def row(self, index: int) -> "FutureState":
        """Собственная копия строки - гипотезы луча не делят состояние"""
        return FutureState(Tensor(self.F.data[index : index + 1].copy()))

    @staticmethod
    def stack(states) -> "FutureState":
        return FutureState(Tensor(np.concatenate([s.F.data for s in states], axis=0)))


@dataclass
class FutureCellOutput:
    """Промежуточные величины ячейки: гейты R, Z, кандидат S и выход F"""
    R: Tensor
    Z: Tensor
    S: Tensor
    F: Tensor


def future_param_shapes(config: "ModelConfig", variant: str) -> Dict[str, Tuple[int, ...]]:
    d, vocab = config.d_model, config.tgt_vocab_size
    shapes: Dict[str, Tuple[int, ...]] = {}
    if config.separate_future_embedding:
        shapes["future.embedding"] = (vocab, d)
    for name in CELL_MATRICES:
        shapes[f"future.{name}"] = (d, d)
    if config.future_bias:
        for name in ("b_r", "b_z", "b_s"):
            shapes[f"future.{name}"] = (d,)
    # отдельная голова, не W_o/W_w выходного слоя
    shapes["future.head_W_w"] = (d, d)
    shapes["future.head_W_o"] = (d, vocab)
    if variant == "model2":
        shapes["future.W_g"] = (2 * d, 1)
        if config.future_bias:
            shapes["future.b_g"] = (1,)
    return shapes


def future_embedding(params: "ModelParams") -> Tensor:
    """Матрица E целевого словаря (общая с входом декодера, если не задано иное)"""
    if params.config.separate_future_embedding:
        return params["future.embedding"]
    return params["tgt_embedding"]


def _with_bias(x: Tensor, params: "ModelParams", name: str) -> Tensor:
    if params.config.future_bias:
        return x + params[f"future.{name}"]
    return x


def future_cell(y_ids, hidden: Tensor, params: "ModelParams", mode: str = "eval") -> FutureCellOutput:
    """
    Ячейка будущего контекста:
        R = σ(W_r·E[y] + U_r·H)
        Z = σ(W_z·E[y] + U_z·H)
        S = ReLU(W·E[y] + U·(R ⊙ H))
        F = Z ⊙ S + (1 − Z) ⊙ H

    Args:
        y_ids: Идентификаторы текущего слова, форма [...]
        hidden: H_i^N верхнего слоя декодера, форма [..., d_model]
        params: Параметры модели (future.*)
        mode: train включает dropout на S, если он разрешён конфигом

    Returns:
        FutureCellOutput
    """
    emb = embedding_lookup(future_embedding(params), y_ids)
    r = sigmoid(_with_bias(emb @ params["future.W_r"] + hidden @ params["future.U_r"], params, "b_r"))
    z = sigmoid(_with_bias(emb @ params["future.W_z"] + hidden @ params["future.U_z"], params, "b_z"))
    s = relu(_with_bias(emb @ params["future.W"] + (r * hidden) @ params["future.U"], params, "b_s"))
    if params.config.future_dropout:
        s = dropout(s, params.config.dropout, params.rng, mode == "train")
    f = interpolate(z, s, hidden)
    return FutureCellOutput(R=r, Z=z, S=s, F=f)


def future_step(y_ids, hidden: Tensor, params: "ModelParams", mode: str = "eval") -> FutureState:
    """F_i по текущему слову y_i (истинному при обучении, сгенерированному при декодировании)"""
    return FutureState(future_cell(y_ids, hidden, params, mode).F)


def masked_mean(encoder_out: Tensor, src_pad_mask: np.ndarray) -> Tensor:
    """Среднее H_e^N по не-PAD позициям, [B, d_model]"""
    keep = (~np.asarray(src_pad_mask, dtype=bool)).astype(np.float64)
    counts = keep.sum(axis=1)
    if np.any(counts == 0):
        raise InputError("cannot initialize the future state from an all-pad source")
    summed = (encoder_out * Tensor(keep[:, :, None])).sum(axis=1)
    return summed * Tensor((1.0 / counts)[:, None])


def init_future_state(
    encoder_out: Tensor,
    src_pad_mask: np.ndarray,
    params: "ModelParams",
    mode: str = "eval",
) -> FutureState:
    """
    F₀: ячейка с E["</s>"] вместо E[y_i] и средним H_e^N вместо H_i^N.

    Args:
        encoder_out: H_e^N [B, J, d_model]
        src_pad_mask: [B, J], True в PAD
        params: Параметры модели

    Returns:
        FutureState [B, d_model]
    """
    mean = masked_mean(encoder_out, src_pad_mask)
    eos = np.full(encoder_out.shape[0], EOS_ID, dtype=np.int64)
    return future_step(eos, mean, params, mode)


def future_logits(state: Union[FutureState, Tensor], params: "ModelParams") -> Tensor:
    """Логиты P̂(ŷ_{i+1} | ·) ∝ exp(𝒲_o·tanh(𝒲_w·F_i))"""
    f = state.F if isinstance(state, FutureState) else state
    return tanh(f @ params["future.head_W_w"]) @ params["future.head_W_o"]


def fuse_context(
    hidden_next: Tensor,
    prev: Union[FutureState, Tensor],
    params: "ModelParams",
) -> Tuple[Tensor, Tensor]:
    """
    Слияние Model II: g = σ([H_{i+1} : F_i]·W_g), H̄ = H_{i+1} + g ⊙ F_i.

    Args:
        hidden_next: H_{i+1}^N [..., d_model]
        prev: F_i той же формы
        params: Параметры модели (future.W_g)

    Returns:
        (H̄ [..., d_model], g [..., 1])
    """
    f = prev.F if isinstance(prev, FutureState) else prev
    gate_in = concat([hidden_next, f], axis=-1) @ params["future.W_g"]
    if params.config.future_bias:
        gate_in = gate_in + params["future.b_g"]
    g = sigmoid(gate_in)
    return hidden_next + g * f, g
