"""
Словари, ввод-вывод корпусов, синтетические параллельные корпуса и батчи
"""

import logging
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import (
    BOS_ID,
    EOS_ID,
    MAX_SEQ_LEN,
    PAD_ID,
    RESERVED_TOKENS,
    SYNTHETIC_TASKS,
    UNK_ID,
)
from errors import InputError
from transformer import causal_mask


logger = logging.getLogger(__name__)

BPE_MARKER = "@@"


@dataclass
class SentencePair:
    """Пара предложений: токены источника и цели"""
    source: List[str]
    target: List[str]

    def __post_init__(self):
        if not self.source or not self.target:
            raise InputError("sentence pair must have non-empty source and target")


@dataclass
class Vocabulary:
    """Словарь токенов; PAD=0, BOS=1, EOS=2 ("</s>"), UNK=3"""
    id_to_token: List[str] = field(default_factory=lambda: list(RESERVED_TOKENS))
    token_to_id: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.id_to_token[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise InputError("vocabulary must start with the reserved tokens")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise InputError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.token_to_id.get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> List[str]:
        """
        Переводит идентификаторы в токены.

        Args:
            ids: Идентификаторы
            strip: Останавливаться на EOS и пропускать PAD/BOS
        """
        tokens = []
        for i in ids:
            i = int(i)
            if strip:
                if i == EOS_ID:
                    break
                if i in (PAD_ID, BOS_ID):
                    continue
            tokens.append(self.id_to_token[i])
        return tokens

    def unknown_tokens(self, tokens: Sequence[str]) -> List[str]:
        return [tok for tok in tokens if tok not in self.token_to_id]

    def to_dict(self) -> dict:
        return {"tokens": list(self.id_to_token)}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        return cls(id_to_token=list(data["tokens"]))


@dataclass
class Batch:
    """
    Батч с паддингом.

    src_pad_mask / tgt_pad_mask - True в позициях PAD,
    causal_mask[i][j] - True, если внимание i -> j запрещено (j > i).
    """
    src_ids: np.ndarray
    tgt_in_ids: np.ndarray
    tgt_out_ids: np.ndarray
    src_pad_mask: np.ndarray
    tgt_pad_mask: np.ndarray
    causal_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.src_ids.shape[0]

    @property
    def token_count(self) -> int:
        return int((~self.tgt_pad_mask).sum())


# ===== Токенизация и словарь =====

def tokenize(line: str) -> List[str]:
    return line.split()


def build_vocab(corpus: Sequence, min_count: int = 1) -> Vocabulary:
    """
    Строит словарь по корпусу.

    Args:
        corpus: Строки или списки токенов
        min_count: Минимальная частота токена

    Returns:
        Vocabulary: зарезервированные id + токены в порядке убывания частоты
    """
    if not corpus:
        raise InputError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for sentence in corpus:
        counts.update(tokenize(sentence) if isinstance(sentence, str) else sentence)

    reserved = set(RESERVED_TOKENS)
    kept = [tok for tok, c in counts.items() if c >= min_count and tok not in reserved]
    # частота по убыванию, затем лексикографически - порядок не зависит от платформы
    kept.sort(key=lambda tok: (-counts[tok], tok))
    vocab = Vocabulary(id_to_token=list(RESERVED_TOKENS) + kept)
    logger.debug(f"Vocabulary built: {len(vocab)} entries (min_count={min_count})")
    return vocab


# ===== Ввод-вывод корпусов =====

def read_corpus(path: str) -> List[SentencePair]:
    """Читает TSV: одна пара на строку, источник и цель разделены одним TAB"""
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InputError(f"{path}:{line_no}: expected exactly one TAB separator")
            try:
                pairs.append(SentencePair(tokenize(parts[0]), tokenize(parts[1])))
            except InputError as e:
                raise InputError(f"{path}:{line_no}: {e}") from e
    return pairs


def write_corpus(path: str, pairs: Sequence[SentencePair]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for pair in pairs:
            f.write(" ".join(pair.source) + "\t" + " ".join(pair.target) + "\n")


# ===== Синтетические задачи =====

def symbol_names(count: int, upper: bool = False) -> List[str]:
    """Имена символов: a..z, затем a1..z1 и т.д."""
    letters = string.ascii_uppercase if upper else string.ascii_lowercase
    names = []
    for i in range(count):
        suffix = "" if i < len(letters) else str(i // len(letters))
        names.append(letters[i % len(letters)] + suffix)
    return names


def make_mapping(source_symbols: Sequence[str], target_symbols: Sequence[str], seed: int) -> Dict[str, str]:
    """Фиксированная случайная биекция источник -> цель"""
    if len(source_symbols) != len(target_symbols):
        raise InputError("mapping needs equally sized alphabets")
    order = np.random.default_rng(seed).permutation(len(target_symbols))
    return {s: target_symbols[int(j)] for s, j in zip(source_symbols, order)}


def apply_mapping(tokens: Sequence[str], mapping: Dict[str, str]) -> List[str]:
    return [mapping[tok] for tok in tokens]


def make_synthetic(
    task: str,
    size: int,
    len_range: Tuple[int, int],
    vocab_size: int,
    seed: int,
    mapping_seed: int = 0,
) -> List[SentencePair]:
    """
    Генерирует синтетический параллельный корпус.

    Args:
        task: copy (цель = источник), reverse (обратный порядок),
              map (посимвольная замена через фиксированную биекцию)
        size: Количество пар
        len_range: Диапазон длин источника (включительно), в пределах [1, 64]
        vocab_size: Размер алфавита символов
        seed: Зерно выборки; одинаковое зерно даёт побитово одинаковый корпус
        mapping_seed: Зерно биекции map-задачи (общее для train/dev/test)

    Returns:
        Список SentencePair
    """
    if task not in SYNTHETIC_TASKS:
        raise InputError(f"unknown synthetic task '{task}', expected one of {', '.join(SYNTHETIC_TASKS)}")
    low, high = len_range
    if not 1 <= low <= high <= MAX_SEQ_LEN:
        raise InputError(f"len_range {len_range} must lie within [1, {MAX_SEQ_LEN}]")
    if vocab_size < 1:
        raise InputError("vocab_size must be positive")

    source_symbols = symbol_names(vocab_size)
    mapping = None
    if task == "map":
        mapping = make_mapping(source_symbols, symbol_names(vocab_size, upper=True), mapping_seed)

    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(size):
        length = int(rng.integers(low, high + 1))
        source = [source_symbols[int(k)] for k in rng.integers(0, vocab_size, size=length)]
        if task == "copy":
            target = list(source)
        elif task == "reverse":
            target = source[::-1]
        else:
            target = apply_mapping(source, mapping)
        pairs.append(SentencePair(source, target))
    return pairs


# ===== Батчи =====

def pad_ids(rows: Sequence[Sequence[int]], width: int) -> np.ndarray:
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for b, row in enumerate(rows):
        out[b, : len(row)] = row
    return out


def collate(pairs: Sequence[SentencePair], src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Batch:
    """Собирает один батч: паддинг до максимумов батча и маски"""
    src_rows, tgt_rows = [], []
    for pair in pairs:
        if len(pair.source) > MAX_SEQ_LEN or len(pair.target) > MAX_SEQ_LEN:
            raise InputError(
                f"pair exceeds the maximum supported length {MAX_SEQ_LEN} "
                f"(source {len(pair.source)}, target {len(pair.target)})"
            )
        src_rows.append(src_vocab.encode(pair.source))
        tgt_rows.append(tgt_vocab.encode(pair.target))

    j_max = max(len(r) for r in src_rows)
    i_max = max(len(r) for r in tgt_rows) + 1
    src = pad_ids(src_rows, j_max)
    tgt_in = pad_ids([[BOS_ID] + r for r in tgt_rows], i_max)
    tgt_out = pad_ids([r + [EOS_ID] for r in tgt_rows], i_max)
    return Batch(
        src_ids=src,
        tgt_in_ids=tgt_in,
        tgt_out_ids=tgt_out,
        src_pad_mask=src == PAD_ID,
        tgt_pad_mask=tgt_out == PAD_ID,
        causal_mask=causal_mask(i_max),
    )


def make_batches(
    pairs: Sequence[SentencePair],
    src_vocab: Vocabulary,
    batch_size: int,
    seed: Optional[int],
    tgt_vocab: Optional[Vocabulary] = None,
) -> List[Batch]:
    """
    Перемешивает пары детерминированно по зерну и режет на батчи.

    Args:
        pairs: Пары предложений
        src_vocab: Словарь источника
        batch_size: Число пар в батче
        seed: Зерно перемешивания; None - исходный порядок
        tgt_vocab: Словарь цели (по умолчанию совпадает с src_vocab)

    Returns:
        Список Batch; последний батч может быть неполным
    """
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    tgt_vocab = tgt_vocab or src_vocab
    order = np.arange(len(pairs)) if seed is None else np.random.default_rng(seed).permutation(len(pairs))
    batches = []
    for start in range(0, len(pairs), batch_size):
        chunk = [pairs[int(i)] for i in order[start : start + batch_size]]
        batches.append(collate(chunk, src_vocab, tgt_vocab))
    return batches


def unpad_batch(batch: Batch, src_vocab: Vocabulary, tgt_vocab: Optional[Vocabulary] = None) -> List[SentencePair]:
    """Обратное к collate: снимает паддинг и декодирует токены"""
    tgt_vocab = tgt_vocab or src_vocab
    pairs = []
    for b in range(batch.size):
        src = src_vocab.decode(batch.src_ids[b][~batch.src_pad_mask[b]])
        tgt = tgt_vocab.decode(batch.tgt_out_ids[b][~batch.tgt_pad_mask[b]])
        pairs.append(SentencePair(src, tgt))
    return pairs


# ===== Мини-BPE для режима файлового корпуса =====

def _word_symbols(word: str) -> Tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + "</w>",)


def learn_bpe(sentences: Iterable[Sequence[str]], merges: int) -> List[Tuple[str, str]]:
    """
    Жадно объединяет самую частую пару символов заданное число раз.

    Args:
        sentences: Токенизированные предложения
        merges: Количество слияний

    Returns:
        Список слияний в порядке изучения
    """
    words = Counter()
    for sentence in sentences:
        words.update(sentence)
    vocab = {_word_symbols(w): c for w, c in words.items()}

    learned = []
    for _ in range(merges):
        pairs = Counter()
        for symbols, count in vocab.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += count
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        learned.append(best)
        merged = {}
        for symbols, count in vocab.items():
            out, i = [], 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    out.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            merged[tuple(out)] = merged.get(tuple(out), 0) + count
        vocab = merged
    return learned


def apply_bpe(tokens: Sequence[str], merges: Sequence[Tuple[str, str]]) -> List[str]:
    """Сегментирует слова по изученным слияниям; продолжения помечаются '@@'"""
    ranks = {pair: i for i, pair in enumerate(merges)}
    out = []
    for word in tokens:
        symbols = list(_word_symbols(word))
        while len(symbols) > 1:
            candidates = [(ranks[p], i) for i, p in enumerate(zip(symbols, symbols[1:])) if p in ranks]
            if not candidates:
                break
            _, i = min(candidates)
            symbols[i : i + 2] = [symbols[i] + symbols[i + 1]]
        symbols[-1] = symbols[-1][: -len("</w>")]
        out.extend(s + BPE_MARKER for s in symbols[:-1])
        out.append(symbols[-1])
    return out


def remove_bpe(tokens: Sequence[str]) -> List[str]:
    return " ".join(tokens).replace(BPE_MARKER + " ", "").split()
