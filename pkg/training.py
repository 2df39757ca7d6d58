"""
Функции потерь (CE, future cost, совместная), сглаживание меток, Adam с
прогревом и цикл обучения для вариантов baseline / model1 / model2
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    METRICS_COLUMNS,
    PAD_ID,
    VARIANTS,
)
from data import Batch, SentencePair, Vocabulary, make_batches
from errors import ConfigError, ContractError, TrainingDivergedError
from futurecost import fuse_context, future_logits, future_step, init_future_state
from tensor import Tensor, backward, concat, log_softmax, no_grad
from transformer import ModelParams, decode, encode, output_logits


logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Гиперпараметры обучения; по умолчанию настольный масштаб"""
    variant: str = "model2"
    lambda_: float = 0.7
    label_smoothing: float = 0.1
    smooth_future: bool = True
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS
    warmup_steps: int = 400
    lr_factor: float = 0.5
    max_steps: int = 3000
    batch_size: int = 64
    seed: int = 1
    validate_every: int = 250
    validate_bleu: bool = False
    select_by: str = "loss"
    include_f0_loss: bool = False
    stop_gradient: bool = False

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {', '.join(VARIANTS)}, got '{self.variant}'")
        if not self.lambda_ >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        for name in ("warmup_steps", "max_steps", "batch_size", "validate_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.select_by not in ("loss", "bleu"):
            raise ConfigError(f"select_by must be 'loss' or 'bleu', got '{self.select_by}'")
        if self.select_by == "bleu" and not self.validate_bleu:
            raise ConfigError("select_by=bleu requires validate_bleu")

    @property
    def has_future(self) -> bool:
        return self.variant != "baseline"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class LossBreakdown:
    """ce - средняя CE на токен, future - средний future-loss, joint = ce + λ·future"""
    ce: float
    future: Optional[float]
    joint: float
    token_count: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    """Моменты Adam по именам параметров и счётчик шагов"""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class ForwardOutputs:
    logits: Tensor
    future_logits: Optional[Tensor] = None
    future_labels: Optional[np.ndarray] = None
    future_pad_mask: Optional[np.ndarray] = None


# ===== Функции потерь =====

def smoothed_targets(labels: np.ndarray, vocab_size: int, eps: float) -> np.ndarray:
    """
    Целевое распределение: (1 − ε) на истинный класс, ε равномерно по
    остальным классам кроме PAD, то есть ε/(V − 2) на класс, а не ε/(V − 1)
    из обычной записи сглаживания. Строка суммируется в 1.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if eps == 0.0:
        target = np.zeros(labels.shape + (vocab_size,))
    else:
        if vocab_size < 3:
            raise ContractError("label smoothing needs at least 3 classes")
        target = np.full(labels.shape + (vocab_size,), eps / (vocab_size - 2))
        target[..., PAD_ID] = 0.0
    np.put_along_axis(target, labels[..., None], 1.0 - eps, axis=-1)
    return target


def ce_loss(logits: Tensor, labels: np.ndarray, pad_mask: np.ndarray, eps: float) -> Tensor:
    """
    Средняя по не-PAD позициям сглаженная кросс-энтропия.

    Args:
        logits: [B, I, V]
        labels: [B, I] истинные идентификаторы
        pad_mask: [B, I], True в PAD-позициях
        eps: Сглаживание меток, [0, 1); при 0 - точная NLL

    Returns:
        Скалярный тензор
    """
    if not 0.0 <= eps < 1.0:
        raise ContractError(f"label smoothing must lie in [0, 1), got {eps}")
    keep = ~np.asarray(pad_mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise ContractError("every position is padded; the loss is undefined")
    weights = smoothed_targets(labels, logits.shape[-1], eps) * (keep[..., None] / count)
    return -(log_softmax(logits, axis=-1) * Tensor(weights)).sum()


def future_targets(tgt_out_ids: np.ndarray, include_f0: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Метки future-loss: для шага i - следующее истинное слово y_{i+1}; на
    последнем не-PAD шаге это EOS. С include_f0 спереди добавляется метка
    y_1 для F₀.

    Returns:
        (labels, pad_mask)
    """
    tgt_out_ids = np.asarray(tgt_out_ids)
    pad_col = np.full((tgt_out_ids.shape[0], 1), PAD_ID, dtype=tgt_out_ids.dtype)
    labels = np.concatenate([tgt_out_ids[:, 1:], pad_col], axis=1)
    if include_f0:
        labels = np.concatenate([tgt_out_ids[:, :1], labels], axis=1)
    return labels, labels == PAD_ID


def future_loss(future_logits_seq: Tensor, labels: np.ndarray, pad_mask: np.ndarray, eps: float) -> Tensor:
    """ℱ(θ) как средняя сглаженная CE по меткам из future_targets"""
    return ce_loss(future_logits_seq, labels, pad_mask, eps)


def joint_loss(ce, future, lam: float):
    """𝒥 = ℒ + λ·ℱ; без future-слагаемого возвращает ℒ"""
    if future is None:
        return ce
    return ce + future * lam


def lr_schedule(step: int, d_model: int, warmup: int, factor: float = 1.0) -> float:
    """rate = factor · d_model^−0.5 · min(step^−0.5, step · warmup^−1.5)"""
    if step < 1:
        raise ContractError(f"lr_schedule step must be >= 1, got {step}")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    rate: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """
    Шаг Adam с коррекцией смещения; параметры и моменты обновляются на месте.
    """
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for name, value in params.items():
        g = grads[name]
        if value.shape != g.shape:
            raise ContractError(f"gradient for '{name}' has shape {list(g.shape)}, expected {list(value.shape)}")
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        value -= rate * (m / bias1) / (np.sqrt(v / bias2) + eps)


# ===== Прямой проход по вариантам =====

def forward_variant(batch: Batch, params: ModelParams, variant: str, cfg: TrainConfig, mode: str) -> ForwardOutputs:
    """
    Прямой проход с teacher forcing.

    baseline: логиты по H.
    model1: плюс F_i = cell(y_i, H_i) по истинным y_i и голова future cost.
    model2: плюс слияние H̄_{i+1} = H_{i+1} + g·F_i (F₀ для первой позиции),
            логиты по H̄ через общие W_o/W_w.
    """
    if params.variant != variant:
        raise ContractError(f"params were built for '{params.variant}', not '{variant}'")

    enc = encode(batch.src_ids, batch.src_pad_mask, params, mode)
    dec = decode(batch.tgt_in_ids, enc, batch.src_pad_mask, batch.causal_mask, params, mode)
    if variant == "baseline":
        return ForwardOutputs(logits=output_logits(dec, params))

    batch_size, length, d_model = dec.shape
    cell_hidden = dec.detach() if cfg.stop_gradient else dec
    future = future_step(batch.tgt_out_ids, cell_hidden, params, mode).F
    fut_logits = future_logits(future, params)
    labels, fut_mask = future_targets(batch.tgt_out_ids, cfg.include_f0_loss)

    f0 = None
    if variant == "model2" or cfg.include_f0_loss:
        enc_hidden = enc.detach() if cfg.stop_gradient else enc
        f0 = init_future_state(enc_hidden, batch.src_pad_mask, params, mode).F
    if cfg.include_f0_loss:
        f0_logits = future_logits(f0, params).reshape(batch_size, 1, fut_logits.shape[-1])
        fut_logits = concat([f0_logits, fut_logits], axis=1)

    if variant == "model2":
        previous = concat([f0.reshape(batch_size, 1, d_model), future[:, : length - 1, :]], axis=1)
        fused, _ = fuse_context(dec, previous, params)
        logits = output_logits(fused, params)
    else:
        logits = output_logits(dec, params)
    return ForwardOutputs(logits, fut_logits, labels, fut_mask)


def compute_loss(
    batch: Batch,
    params: ModelParams,
    variant: str,
    cfg: TrainConfig,
    mode: str = "train",
) -> Tuple[Tensor, LossBreakdown]:
    """Совместная функция потерь и её разложение для одного батча"""
    out = forward_variant(batch, params, variant, cfg, mode)
    ce = ce_loss(out.logits, batch.tgt_out_ids, batch.tgt_pad_mask, cfg.label_smoothing)
    future = None
    if out.future_logits is not None:
        eps = cfg.label_smoothing if cfg.smooth_future else 0.0
        future = future_loss(out.future_logits, out.future_labels, out.future_pad_mask, eps)
    joint = joint_loss(ce, future, cfg.lambda_)
    breakdown = LossBreakdown(
        ce=ce.item(),
        future=future.item() if future is not None else None,
        joint=joint.item(),
        token_count=batch.token_count,
    )
    return joint, breakdown


def train_step(
    batch: Batch,
    params: ModelParams,
    variant: str,
    cfg: TrainConfig,
    state: OptimizerState,
) -> LossBreakdown:
    """
    Один шаг обучения: прямой проход, обратный проход, обновление Adam.

    Raises:
        TrainingDivergedError: функция потерь стала NaN/Inf
    """
    params.zero_grad()
    joint, breakdown = compute_loss(batch, params, variant, cfg, "train")
    if not math.isfinite(breakdown.joint):
        raise TrainingDivergedError(
            f"non-finite loss at step {state.step + 1}: ce={breakdown.ce} future={breakdown.future}"
        )
    backward(joint, leaves=params.tensors.values())
    rate = lr_schedule(state.step + 1, params.config.d_model, cfg.warmup_steps, cfg.lr_factor)
    adam_step(
        {name: t.data for name, t in params.items()},
        {name: t.grad for name, t in params.items()},
        state,
        rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    )
    return breakdown


def evaluate_loss(batches: Sequence[Batch], params: ModelParams, variant: str, cfg: TrainConfig) -> LossBreakdown:
    """Средние по токенам потери на наборе батчей (eval, без записи ленты)"""
    totals = {"ce": 0.0, "future": 0.0, "joint": 0.0}
    tokens = 0
    with no_grad():
        for batch in batches:
            _, part = compute_loss(batch, params, variant, cfg, "eval")
            n = part.token_count
            totals["ce"] += part.ce * n
            totals["joint"] += part.joint * n
            if part.future is not None:
                totals["future"] += part.future * n
            tokens += n
    if tokens == 0:
        raise ContractError("cannot evaluate the loss on an empty set")
    return LossBreakdown(
        ce=totals["ce"] / tokens,
        future=totals["future"] / tokens if cfg.has_future else None,
        joint=totals["joint"] / tokens,
        token_count=tokens,
    )


# ===== Журнал метрик =====

def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, int):
        return str(value)
    return f"{value:.6f}"


class MetricsLog:
    """Журнал метрик: TSV, заголовок + одна запись на валидацию"""

    def __init__(self, path: Optional[str]):
        self.path = path
        self.records: List[Dict[str, object]] = []
        if path:
            with open(path, "w", encoding="utf-8") as f:
                f.write("\t".join(METRICS_COLUMNS) + "\n")

    def append(self, record: Dict[str, object]) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write("\t".join(_fmt(record.get(col)) for col in METRICS_COLUMNS) + "\n")


# ===== Цикл обучения =====

@dataclass
class TrainResult:
    best_params: ModelParams
    best_step: int
    best_score: float
    last_step: int
    records: List[Dict[str, object]]
    optimizer: OptimizerState


def train_model(
    params: ModelParams,
    pairs: Sequence[SentencePair],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    dev_batches: Sequence[Batch],
    cfg: TrainConfig,
    metrics_path: Optional[str] = None,
    bleu_fn: Optional[Callable[[ModelParams], float]] = None,
    on_validate: Optional[Callable[[ModelParams, OptimizerState, int, bool], None]] = None,
    show_progress: bool = False,
) -> TrainResult:
    """
    Обучает модель max_steps шагов с валидацией каждые validate_every шагов.

    Args:
        params: Инициализированные параметры (обновляются на месте)
        pairs: Обучающие пары; перемешиваются заново каждую эпоху (seed + epoch)
        src_vocab: Словарь источника
        tgt_vocab: Словарь цели
        dev_batches: Батчи валидации
        cfg: Конфигурация обучения
        metrics_path: Путь журнала метрик (TSV) или None
        bleu_fn: Функция dev BLEU (нужна при validate_bleu)
        on_validate: Колбэк (params, state, step, is_best) после каждой валидации
        show_progress: Показывать tqdm-прогресс

    Returns:
        TrainResult с копией лучших параметров
    """
    cfg.validate()
    if cfg.validate_bleu and bleu_fn is None:
        raise ConfigError("validate_bleu needs a BLEU function")

    state = OptimizerState()
    log = MetricsLog(metrics_path)
    best: Dict[str, object] = {"params": params.copy(), "step": 0, "score": math.inf}
    running = {"ce": 0.0, "future": 0.0, "joint": 0.0, "tokens": 0}

    def validate(step: int) -> None:
        dev = evaluate_loss(dev_batches, params, cfg.variant, cfg)
        dev_bleu = bleu_fn(params) if cfg.validate_bleu else None
        tokens = running["tokens"]
        record = {
            "step": step,
            "lr": lr_schedule(step, params.config.d_model, cfg.warmup_steps, cfg.lr_factor) if step else None,
            "train_ce": running["ce"] / tokens if tokens else None,
            "train_future": running["future"] / tokens if tokens and cfg.has_future else None,
            "train_joint": running["joint"] / tokens if tokens else None,
            "dev_ce": dev.ce,
            "dev_future": dev.future,
            "dev_joint": dev.joint,
            "dev_bleu": dev_bleu,
        }
        log.append(record)
        score = -dev_bleu if cfg.select_by == "bleu" else dev.joint
        is_best = score < best["score"]
        if is_best:
            best.update(params=params.copy(), step=step, score=score)
        logger.info(
            f"step {step}: dev ce={dev.ce:.4f} joint={dev.joint:.4f}"
            + (f" future={dev.future:.4f}" if dev.future is not None else "")
            + (f" bleu={dev_bleu:.2f}" if dev_bleu is not None else "")
            + (" (best)" if is_best else "")
        )
        if on_validate:
            on_validate(params, state, step, is_best)
        running.update(ce=0.0, future=0.0, joint=0.0, tokens=0)

    validate(0)
    step, epoch = 0, 0
    progress = tqdm(total=cfg.max_steps, desc=f"train {cfg.variant}", disable=not show_progress, leave=False)
    try:
        while step < cfg.max_steps:
            for batch in make_batches(pairs, src_vocab, cfg.batch_size, cfg.seed + epoch, tgt_vocab):
                part = train_step(batch, params, cfg.variant, cfg, state)
                step += 1
                n = part.token_count
                running["ce"] += part.ce * n
                running["joint"] += part.joint * n
                running["future"] += (part.future or 0.0) * n
                running["tokens"] += n
                progress.update(1)
                progress.set_postfix(loss=f"{part.joint:.3f}")
                if step % cfg.validate_every == 0 or step == cfg.max_steps:
                    validate(step)
                if step >= cfg.max_steps:
                    break
            epoch += 1
    finally:
        progress.close()

    return TrainResult(
        best_params=best["params"],
        best_step=best["step"],
        best_score=best["score"],
        last_step=step,
        records=log.records,
        optimizer=state,
    )
