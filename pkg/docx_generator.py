"""
Экспорт отчётов (BLEU, группы длины, свип λ) в DOCX.
Использует связку markdown -> html -> docx для поддержки таблиц.
"""

import io
import logging
import re
from typing import Optional, Sequence

import markdown
from docx import Document
from htmldocx import HtmlToDocx

from evaluation import BleuReport, LengthBucketReport


logger = logging.getLogger(__name__)


def evaluation_markdown(report: BleuReport, buckets: Optional[LengthBucketReport] = None, title: str = "Evaluation") -> str:
    """Markdown-отчёт: корпусный BLEU и, если есть, таблица групп длины"""
    lines = [
        f"# {title}",
        f"Corpus BLEU: **{report.bleu:.2f}**",
        "",
        "| n | precision |",
        "|---|---|",
    ]
    lines += [f"| {n} | {p:.2f} |" for n, p in enumerate(report.precisions, start=1)]
    lines += [
        "",
        f"Brevity penalty {report.brevity_penalty:.4f}, hypothesis length {report.hyp_length}, "
        f"reference length {report.ref_length}.",
    ]
    if buckets is not None:
        lines += ["## By source length", "| length | sentences | BLEU |", "|---|---|---|"]
        for entry in buckets.buckets:
            bleu = f"{entry.report.bleu:.2f}" if entry.report else "-"
            lines.append(f"| {entry.label} | {entry.count} | {bleu} |")
    return "\n".join(lines) + "\n"


def sweep_markdown(rows: Sequence[dict], title: str = "Lambda sweep") -> str:
    """Markdown-таблица свипа: строки с ключами lambda, status, best_step, dev_ce, dev_bleu"""
    lines = [f"# {title}", "| λ | status | best step | dev CE | dev BLEU |", "|---|---|---|---|---|"]
    for row in rows:
        ce = f"{row['dev_ce']:.4f}" if row.get("dev_ce") is not None else "-"
        bleu = f"{row['dev_bleu']:.2f}" if row.get("dev_bleu") is not None else "-"
        step = row.get("best_step")
        lines.append(f"| {row['lambda']} | {row['status']} | {step if step is not None else '-'} | {ce} | {bleu} |")
    return "\n".join(lines) + "\n"


def _normalize_markdown(markdown_text: str) -> str:
    """Пустая строка перед таблицами и заголовками, иначе markdown их не распознаёт"""
    lines = markdown_text.split("\n")
    fixed_lines = []
    for i, line in enumerate(lines):
        previous = lines[i - 1].strip() if i > 0 else ""
        if "|" in line and previous and not previous.startswith("|"):
            if i + 1 < len(lines) and set(lines[i + 1].strip()) <= set("|-: "):
                fixed_lines.append("")
        if re.match(r"^\s*#{1,6}\s", line) and previous:
            fixed_lines.append("")
        fixed_lines.append(line)
    return "\n".join(fixed_lines)


def convert_markdown_to_docx(markdown_text: str) -> bytes:
    """
    Конвертирует Markdown текст в DOCX документ.

    Args:
        markdown_text: Исходный текст в формате Markdown

    Returns:
        Байты сгенерированного DOCX файла
    """
    markdown_text = _normalize_markdown(markdown_text)
    html_text = markdown.markdown(markdown_text, extensions=["tables", "extra"])

    doc = Document()
    parser = HtmlToDocx()
    try:
        parser.add_html_to_document(html_text, doc)
    except Exception as e:
        # отчёт всё равно сохраняется, пусть и без форматирования
        logger.error(f"DOCX formatting failed, writing plain text: {e}")
        doc.add_paragraph(markdown_text)

    file_stream = io.BytesIO()
    doc.save(file_stream)
    return file_stream.getvalue()


def write_docx(path: str, markdown_text: str) -> None:
    with open(path, "wb") as f:
        f.write(convert_markdown_to_docx(markdown_text))
    logger.info(f"Report written to {path}")
