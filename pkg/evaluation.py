"""
Регистрозависимый корпусный 4-граммный BLEU (семантика multi-bleu) и отчёт
по группам длины исходного предложения
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

from sacrebleu.metrics import BLEU

from config import BUCKET_EDGES
from data import SentencePair
from errors import InputError


logger = logging.getLogger(__name__)

# без сглаживания и токенизации: на уже токенизированном тексте это multi-bleu.perl
_BLEU = BLEU(tokenize="none", smooth_method="none", force=True)


@dataclass
class BleuReport:
    """bleu и precisions - в процентах; precisions по n = 1..4"""
    bleu: float
    precisions: List[float]
    brevity_penalty: float
    hyp_length: int
    ref_length: int

    @property
    def ratio(self) -> float:
        return self.hyp_length / self.ref_length if self.ref_length else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BucketEntry:
    label: str
    count: int
    report: Optional[BleuReport]


@dataclass
class LengthBucketReport:
    buckets: List[BucketEntry]

    @property
    def total(self) -> int:
        return sum(b.count for b in self.buckets)


def _join(sentence) -> str:
    return sentence if isinstance(sentence, str) else " ".join(sentence)


def bleu4(hypotheses: Sequence, references: Sequence) -> BleuReport:
    """
    Корпусный BLEU-4 с отсечением счётчиков n-грамм и штрафом краткости.

    Args:
        hypotheses: Гипотезы - строки или списки токенов
        references: По одному эталону на гипотезу

    Returns:
        BleuReport; 0, если хотя бы одна точность n-грамм нулевая
    """
    if len(hypotheses) != len(references):
        raise InputError(f"got {len(hypotheses)} hypotheses but {len(references)} references")
    hyps = [_join(h) for h in hypotheses]
    refs = [_join(r) for r in references]
    score = _BLEU.corpus_score(hyps, [refs])
    return BleuReport(
        bleu=float(score.score),
        precisions=[float(p) for p in score.precisions],
        brevity_penalty=float(score.bp),
        hyp_length=int(score.sys_len),
        ref_length=int(score.ref_len),
    )


def bucket_labels(edges: Sequence[int] = BUCKET_EDGES) -> List[str]:
    labels, low = [], 0
    for edge in edges:
        labels.append(f"({low},{edge}]")
        low = edge
    labels.append(f"({low},inf)")
    return labels


def bucket_index(length: int, edges: Sequence[int] = BUCKET_EDGES) -> int:
    """Интервалы закрыты справа: длина 10 попадает в (0,10]"""
    for i, edge in enumerate(edges):
        if length <= edge:
            return i
    return len(edges)


def bucket_report(pairs: Sequence[SentencePair], hypotheses: Sequence) -> LengthBucketReport:
    """
    BLEU по шести группам длины исходного предложения.
    Пустые группы имеют count = 0 и report = None.
    """
    return bucket_report_from_lists([p.source for p in pairs], [p.target for p in pairs], hypotheses)


def bucket_report_from_lists(sources: Sequence, references: Sequence, hypotheses: Sequence) -> LengthBucketReport:
    """То же по выровненным спискам; источники - строки или списки токенов"""
    if not len(sources) == len(references) == len(hypotheses):
        raise InputError(
            f"got {len(sources)} sources, {len(references)} references and {len(hypotheses)} hypotheses"
        )
    groups: Dict[int, List[int]] = {}
    for i, source in enumerate(sources):
        length = len(source.split()) if isinstance(source, str) else len(source)
        groups.setdefault(bucket_index(length), []).append(i)

    buckets = []
    for index, label in enumerate(bucket_labels()):
        members = groups.get(index, [])
        report = None
        if members:
            report = bleu4([hypotheses[i] for i in members], [references[i] for i in members])
        buckets.append(BucketEntry(label=label, count=len(members), report=report))
    return LengthBucketReport(buckets=buckets)


def token_accuracy(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Доля позиций эталона, совпавших с гипотезой на той же позиции"""
    if len(hypotheses) != len(references):
        raise InputError(f"got {len(hypotheses)} hypotheses but {len(references)} references")
    total = sum(len(r) for r in references)
    if total == 0:
        return 0.0
    hits = sum(sum(1 for h, r in zip(hyp, ref) if h == r) for hyp, ref in zip(hypotheses, references))
    return hits / total


# ===== Форматирование отчётов =====

def format_bleu(report: BleuReport) -> str:
    """Строка в стиле multi-bleu.perl"""
    precisions = "/".join(f"{p:.1f}" for p in report.precisions)
    return (
        f"BLEU = {report.bleu:.2f}, {precisions} (BP={report.brevity_penalty:.3f}, "
        f"ratio={report.ratio:.3f}, hyp_len={report.hyp_length}, ref_len={report.ref_length})"
    )


def format_buckets(buckets: LengthBucketReport) -> str:
    lines = ["bucket\tcount\tbleu"]
    for entry in buckets.buckets:
        bleu = f"{entry.report.bleu:.2f}" if entry.report else "null"
        lines.append(f"{entry.label}\t{entry.count}\t{bleu}")
    return "\n".join(lines) + "\n"


def report_key_values(report: BleuReport, buckets: Optional[LengthBucketReport] = None) -> str:
    """Машиночитаемый отчёт: строки `key = value`"""
    lines = [
        f"bleu = {report.bleu:.4f}",
        *(f"precision_{n} = {p:.4f}" for n, p in enumerate(report.precisions, start=1)),
        f"brevity_penalty = {report.brevity_penalty:.6f}",
        f"hyp_length = {report.hyp_length}",
        f"ref_length = {report.ref_length}",
    ]
    if buckets is not None:
        for entry in buckets.buckets:
            bleu = f"{entry.report.bleu:.4f}" if entry.report else "null"
            lines.append(f"bucket {entry.label} count = {entry.count}")
            lines.append(f"bucket {entry.label} bleu = {bleu}")
    return "\n".join(lines) + "\n"
