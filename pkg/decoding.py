"""
Жадное декодирование и поиск по лучу для baseline / model1 / model2.

Кэша ключей/значений нет: на каждом шаге префиксы всех активных гипотез
прогоняются через декодер целиком, одним батчем.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import BOS_ID, EOS_ID, MAX_SEQ_LEN, PAD_ID
from data import Vocabulary
from errors import ConfigError, ContractError, InputError
from futurecost import FutureState, fuse_context, future_logits, future_step, init_future_state
from tensor import Tensor, log_softmax, no_grad, softmax
from transformer import ModelParams, causal_mask, decode, encode, output_logits


logger = logging.getLogger(__name__)

# MAX_SEQ_LEN слов и завершающий EOS
MAX_DECODE_STEPS = MAX_SEQ_LEN + 1


@dataclass
class DecodeConfig:
    """
    beam_size: ширина луча (1 = жадный поиск)
    max_decode_len: предел числа порождённых токенов; None - 2·|src| + 10
    length_penalty: α в ((5 + len) / 6)^α; 0 - сырая сумма log P
    future_interpolation: смешивать P с распределением головы future cost
    """
    beam_size: int = 4
    max_decode_len: Optional[int] = None
    length_penalty: float = 0.0
    future_interpolation: bool = False

    def validate(self) -> None:
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_decode_len is not None and not 1 <= self.max_decode_len <= MAX_DECODE_STEPS:
            raise ConfigError(f"max_decode_len must lie in [1, {MAX_DECODE_STEPS}], got {self.max_decode_len}")
        if self.length_penalty < 0:
            raise ConfigError(f"length_penalty must be >= 0, got {self.length_penalty}")

    def decode_limit(self, src_len: int) -> int:
        if self.max_decode_len is not None:
            return self.max_decode_len
        return min(2 * src_len + 10, MAX_DECODE_STEPS)


@dataclass
class BeamHypothesis:
    """Гипотеза луча: токены с BOS в начале, накопленный log P и своё состояние F"""
    tokens: List[int]
    score: float = 0.0
    step_log_probs: List[float] = field(default_factory=list)
    finished: bool = False
    future: Optional[FutureState] = None

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    @property
    def output_ids(self) -> List[int]:
        """Порождённые токены без BOS и завершающего EOS"""
        out = self.tokens[1:]
        if out and out[-1] == EOS_ID:
            out = out[:-1]
        return out

    def extend(self, token: int, log_prob: float, future: Optional[FutureState]) -> "BeamHypothesis":
        if self.finished:
            raise ContractError("a finished hypothesis cannot be extended")
        return BeamHypothesis(
            tokens=self.tokens + [token],
            score=self.score + log_prob,
            step_log_probs=self.step_log_probs + [log_prob],
            finished=token == EOS_ID,
            future=future,
        )


@dataclass
class GreedyResult:
    """future_states: F_i после каждого порождённого токена, [d_model]; пусто без F"""
    token_ids: List[int]
    log_probs: List[float]
    finished: bool
    future_states: List[np.ndarray] = field(default_factory=list)

    @property
    def score(self) -> float:
        return float(sum(self.log_probs))


@dataclass
class TraceStep:
    """
    Запись одного шага луча.
    candidates: top beam_size продолжений каждого родителя (родитель, токен, score),
    включая отсечённые; родитель - индекс в survivors предыдущего шага.
    """
    step: int
    candidates: List[Tuple[int, int, float]]
    survivors: List[BeamHypothesis]
    finished: List[BeamHypothesis]
    best_score: float


def length_penalty(length: int, alpha: float) -> float:
    if alpha == 0.0:
        return 1.0
    return ((5.0 + length) / 6.0) ** alpha


def ranking_key(hyp: BeamHypothesis, alpha: float) -> Tuple[float, Tuple[int, ...]]:
    """Ключ сортировки: больший штрафованный score, затем лексикографически меньшие токены"""
    return (-hyp.score / length_penalty(hyp.length, alpha), tuple(hyp.tokens))


class DecoderSession:
    """
    Состояние декодирования одного предложения: выход кодировщика и F₀.
    Параметры только читаются, поэтому сессии разных потоков независимы.
    """

    def __init__(self, src_ids: Sequence[int], params: ModelParams, variant: str, cfg: DecodeConfig):
        if params.variant != variant:
            raise ContractError(f"params were built for '{params.variant}', not '{variant}'")
        if cfg.future_interpolation and variant == "baseline":
            raise ConfigError("future_interpolation needs a model1 or model2 checkpoint")
        src = np.asarray(src_ids, dtype=np.int64).reshape(1, -1)
        if src.shape[1] == 0:
            raise InputError("cannot decode an empty source sentence")
        self.params = params
        self.variant = variant
        self.cfg = cfg
        self.src_len = src.shape[1]
        self.src_pad_mask = src == PAD_ID
        # Model I декодирует только по основному распределению; F нужен лишь для слияния или смешивания
        self.tracks_future = variant == "model2" or cfg.future_interpolation
        with no_grad():
            self.encoder_out = encode(src, self.src_pad_mask, params, "eval")
            self.initial_future = (
                init_future_state(self.encoder_out, self.src_pad_mask, params, "eval") if self.tracks_future else None
            )

    @property
    def limit(self) -> int:
        """Предел числа порождённых токенов: max_len слов модели и EOS"""
        return min(self.cfg.decode_limit(self.src_len), self.params.config.max_len + 1)

    def initial_hypothesis(self) -> BeamHypothesis:
        return BeamHypothesis(tokens=[BOS_ID], future=self.initial_future)

    def step(self, hyps: Sequence[BeamHypothesis]) -> Tuple[np.ndarray, Tensor]:
        """
        Распределение следующего слова для гипотез одинаковой длины.

        Returns:
            (log P [K, V], H верхнего слоя на последней позиции [K, d_model])
        """
        prefixes = np.array([h.tokens for h in hyps], dtype=np.int64)
        k, t = prefixes.shape
        with no_grad():
            memory = Tensor(np.repeat(self.encoder_out.data, k, axis=0))
            pad = np.repeat(self.src_pad_mask, k, axis=0)
            dec = decode(prefixes, memory, pad, causal_mask(t), self.params, "eval")
            hidden = dec[:, t - 1, :]
            prev = FutureState.stack([h.future for h in hyps]) if self.tracks_future else None
            fused = fuse_context(hidden, prev, self.params)[0] if self.variant == "model2" else hidden
            log_probs = log_softmax(output_logits(fused, self.params), axis=-1).data
            if self.cfg.future_interpolation:
                predicted = softmax(future_logits(prev, self.params), axis=-1).data
                with np.errstate(divide="ignore"):
                    log_probs = np.log(0.5 * (np.exp(log_probs) + predicted))
        return log_probs, hidden

    def advance(self, tokens: Sequence[int], hidden: Tensor) -> List[Optional[FutureState]]:
        """F_i по только что порождённым токенам; каждая гипотеза получает свою копию"""
        if not self.tracks_future:
            return [None] * len(tokens)
        with no_grad():
            state = future_step(np.asarray(tokens, dtype=np.int64), hidden, self.params, "eval")
        return [state.row(i) for i in range(len(tokens))]


def greedy_decode(
    src_ids: Sequence[int],
    params: ModelParams,
    variant: str,
    cfg: Optional[DecodeConfig] = None,
) -> GreedyResult:
    """
    Жадное декодирование: argmax на каждом шаге (при равенстве - меньший id),
    остановка на EOS или на пределе длины.
    """
    cfg = cfg or DecodeConfig(beam_size=1)
    cfg.validate()
    session = DecoderSession(src_ids, params, variant, cfg)
    hyp = session.initial_hypothesis()
    states: List[np.ndarray] = []
    for _ in range(session.limit):
        log_probs, hidden = session.step([hyp])
        # тот же порядок, что у луча: по накопленному score, при равенстве меньший id
        token = int(np.argmax(hyp.score + log_probs[0]))
        future = session.advance([token], hidden)[0]
        hyp = hyp.extend(token, float(log_probs[0, token]), future)
        if future is not None:
            states.append(future.F.data[0])
        if hyp.finished:
            break
    return GreedyResult(
        token_ids=hyp.output_ids, log_probs=hyp.step_log_probs, finished=hyp.finished, future_states=states
    )


def _run_beam(
    src_ids: Sequence[int],
    params: ModelParams,
    variant: str,
    cfg: DecodeConfig,
    trace: Optional[List[TraceStep]] = None,
) -> List[BeamHypothesis]:
    cfg.validate()
    alpha = cfg.length_penalty
    session = DecoderSession(src_ids, params, variant, cfg)
    active = [session.initial_hypothesis()]
    finished: List[BeamHypothesis] = []

    for step in range(1, session.limit + 1):
        log_probs, hidden = session.step(active)
        candidates = []
        token_ids = np.arange(log_probs.shape[1])
        for parent, hyp in enumerate(active):
            scores = hyp.score + log_probs[parent]
            # в общий top beam_size попадают только top beam_size каждого родителя
            for token in np.lexsort((token_ids, -scores))[: cfg.beam_size]:
                token = int(token)
                candidates.append((-float(scores[token]), tuple(hyp.tokens) + (token,), parent, token))
        pool = [(parent, token, -neg) for neg, _, parent, token in candidates]
        candidates.sort(key=lambda c: (c[0], c[1]))
        chosen = candidates[: cfg.beam_size]

        futures = session.advance([c[3] for c in chosen], hidden[[c[2] for c in chosen]])
        extended = [
            active[parent].extend(token, float(log_probs[parent, token]), future)
            for (_, _, parent, token), future in zip(chosen, futures)
        ]
        finished.extend(h for h in extended if h.finished)
        active = [h for h in extended if not h.finished]

        if trace is not None:
            ranked = sorted(finished + active, key=lambda h: ranking_key(h, alpha))
            trace.append(
                TraceStep(
                    step=step,
                    candidates=pool,
                    survivors=list(active),
                    finished=list(finished),
                    best_score=-ranking_key(ranked[0], alpha)[0],
                )
            )
        if not active:
            break
        # без штрафа длины score только убывает: активные уже не войдут в top beam_size
        if alpha == 0.0 and len(finished) >= cfg.beam_size:
            kth = sorted(h.score for h in finished)[-cfg.beam_size]
            if max(h.score for h in active) <= kth:
                break

    return sorted(finished + active, key=lambda h: ranking_key(h, alpha))


def beam_search(
    src_ids: Sequence[int],
    params: ModelParams,
    variant: str,
    cfg: Optional[DecodeConfig] = None,
) -> List[BeamHypothesis]:
    """
    Поиск по лучу по log P (baseline/model1 по H, model2 со слиянием с F).

    Каждая гипотеза несёт своё состояние F, обновлённое её последним токеном.
    Завершённые гипотезы откладываются и ранжируются вместе с оставшимися
    активными.

    Returns:
        Гипотезы по убыванию штрафованного score
    """
    return _run_beam(src_ids, params, variant, cfg or DecodeConfig())


def trace_beam(
    src_ids: Sequence[int],
    params: ModelParams,
    variant: str,
    cfg: Optional[DecodeConfig] = None,
) -> Tuple[List[TraceStep], List[BeamHypothesis]]:
    """Поиск по лучу с пошаговой записью расширений"""
    trace: List[TraceStep] = []
    ranked = _run_beam(src_ids, params, variant, cfg or DecodeConfig(), trace)
    return trace, ranked


def _render_hypothesis(hyp: BeamHypothesis, vocab: Vocabulary) -> str:
    words = " ".join(vocab.decode(hyp.tokens[1:], strip=False))
    return f"{words} ({hyp.score:.4f})"


def _render_candidates(record: TraceStep, vocab: Vocabulary) -> str:
    words = vocab.decode([token for _, token, _ in record.candidates], strip=False)
    return " ".join(f"{parent}:{word}({score:.4f})" for (parent, _, score), word in zip(record.candidates, words))


def format_trace(trace: Sequence[TraceStep], vocab: Vocabulary, sentence: Optional[int] = None) -> str:
    """
    Текст трассы: одна строка на шаг, поля через табуляцию:
    [sentence,] step, best_score, active, finished, кандидаты
    (`родитель:слово(score)` через пробел), затем гипотезы луча
    (завершённые помечены "* ").
    """
    prefix = [] if sentence is None else [str(sentence)]
    lines = []
    for record in trace:
        hyps = [_render_hypothesis(h, vocab) for h in record.survivors]
        hyps += ["* " + _render_hypothesis(h, vocab) for h in record.finished]
        lines.append(
            "\t".join(
                prefix
                + [str(record.step), f"{record.best_score:.4f}", str(len(record.survivors)), str(len(record.finished))]
                + [_render_candidates(record, vocab)]
                + hyps
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")


def translate_ids(
    src_ids: Sequence[int],
    params: ModelParams,
    variant: str,
    cfg: Optional[DecodeConfig] = None,
) -> List[int]:
    """Лучший перевод: greedy при beam_size = 1, иначе вершина луча"""
    cfg = cfg or DecodeConfig()
    if cfg.beam_size == 1:
        return greedy_decode(src_ids, params, variant, cfg).token_ids
    return beam_search(src_ids, params, variant, cfg)[0].output_ids


def sequence_log_prob(hyp: BeamHypothesis) -> float:
    """Пересчёт score по пошаговым log P"""
    return math.fsum(hyp.step_log_probs)
