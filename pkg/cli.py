"""
Командная строка: train, translate, evaluate, sweep, generate.

Каждый ключ конфигурации можно задать в файле (--config) и переопределить
флагом; ошибки печатаются одной строкой `error: <Класс>: <сообщение>`.
"""

import argparse
import logging
import os
import sys
from dataclasses import dataclass, replace
from functools import partial
from typing import List, Optional, Sequence, Tuple

from tqdm import tqdm

from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from config import DEFAULT_SWEEP_LAMBDAS, LOG_FORMAT, SYNTHETIC_TASKS
from data import (
    SentencePair,
    Vocabulary,
    apply_bpe,
    build_vocab,
    learn_bpe,
    make_batches,
    make_synthetic,
    read_corpus,
    remove_bpe,
    tokenize,
    write_corpus,
)
from decoding import DecodeConfig, format_trace, trace_beam, translate_ids
from docx_generator import evaluation_markdown, sweep_markdown, write_docx
from errors import ConfigError, FutureNMTError, InputError
from evaluation import (
    bleu4,
    bucket_report_from_lists,
    format_bleu,
    format_buckets,
    report_key_values,
    token_accuracy,
)
from run_config import BOOL_KEYS, RunConfig, build_run_config, config_keys, load_config_file, parse_value
from training import TrainResult, evaluate_loss, train_model
from transformer import ModelParams, init_model_params


logger = logging.getLogger(__name__)

# зёрна dev/test синтетической задачи сдвинуты относительно обучающего
DEV_SEED_OFFSET = 10007
TEST_SEED_OFFSET = 20011


@dataclass
class Datasets:
    train: List[SentencePair]
    dev: List[SentencePair]
    test: Optional[List[SentencePair]]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    bpe: List[Tuple[str, str]]


def last_checkpoint_path(path: str) -> str:
    return f"{path}.last"


def _segment(pairs: Optional[List[SentencePair]], merges) -> Optional[List[SentencePair]]:
    if pairs is None or not merges:
        return pairs
    return [SentencePair(apply_bpe(p.source, merges), apply_bpe(p.target, merges)) for p in pairs]


def load_datasets(run: RunConfig) -> Datasets:
    """Синтетическая задача или TSV-корпус; словари строятся по обучающей части"""
    if run.task:
        lens = (run.task_min_len, run.task_max_len)
        train = make_synthetic(run.task, run.task_size, lens, run.task_vocab, run.seed, run.mapping_seed)
        dev = make_synthetic(run.task, run.dev_size, lens, run.task_vocab, run.seed + DEV_SEED_OFFSET, run.mapping_seed)
        test = make_synthetic(run.task, run.test_size, lens, run.task_vocab, run.seed + TEST_SEED_OFFSET, run.mapping_seed)
    elif run.corpus:
        train = read_corpus(run.corpus)
        dev = read_corpus(run.dev)
        test = read_corpus(run.test) if run.test else None
    else:
        raise ConfigError("training needs a synthetic --task or a --corpus")
    if not train:
        raise InputError("the training corpus is empty")
    if not dev:
        raise InputError("the dev set is empty")

    merges: List[Tuple[str, str]] = []
    if run.bpe_merges:
        merges = learn_bpe([p.source for p in train] + [p.target for p in train], run.bpe_merges)
        train, dev, test = _segment(train, merges), _segment(dev, merges), _segment(test, merges)

    src_vocab = build_vocab([p.source for p in train], run.min_count)
    tgt_vocab = build_vocab([p.target for p in train], run.min_count)
    logger.info(
        f"Data: {len(train)} train / {len(dev)} dev / {len(test) if test else 0} test pairs, "
        f"vocab {len(src_vocab)} -> {len(tgt_vocab)}"
    )
    return Datasets(train, dev, test, src_vocab, tgt_vocab, merges)


def translate_tokens(
    sources: Sequence[List[str]],
    params: ModelParams,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    cfg: DecodeConfig,
    show_progress: bool = False,
) -> List[List[str]]:
    """Переводит токенизированные предложения; пустой источник даёт пустой перевод"""
    outputs = []
    for tokens in tqdm(sources, desc="translate", disable=not show_progress, leave=False):
        if not tokens:
            outputs.append([])
            continue
        ids = translate_ids(src_vocab.encode(tokens), params, params.variant, cfg)
        outputs.append(tgt_vocab.decode(ids))
    return outputs


def dev_bleu(params: ModelParams, pairs: Sequence[SentencePair], src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> float:
    """Корпусный BLEU жадных переводов"""
    hyps = translate_tokens([p.source for p in pairs], params, src_vocab, tgt_vocab, DecodeConfig(beam_size=1))
    return bleu4([remove_bpe(h) for h in hyps], [remove_bpe(p.target) for p in pairs]).bleu


def run_training(run: RunConfig, data: Datasets, show_progress: bool = False) -> Tuple[TrainResult, list]:
    """
    Обучает один вариант: лучший чекпоинт пишется в run.checkpoint, последний
    - рядом с суффиксом .last, журнал метрик - в run.metrics.

    Returns:
        (TrainResult, батчи dev)
    """
    train_cfg = run.train_config()
    model_cfg = run.model_config(len(data.src_vocab), len(data.tgt_vocab))
    params = init_model_params(model_cfg, run.variant, run.seed)
    dev_batches = make_batches(data.dev, data.src_vocab, train_cfg.batch_size, None, data.tgt_vocab)
    extra = {"train": train_cfg.to_dict(), "bpe_merges": [list(m) for m in data.bpe]}

    def on_validate(current: ModelParams, state, step: int, is_best: bool) -> None:
        ckpt = Checkpoint(current, data.src_vocab, data.tgt_vocab, step, state, extra)
        save_checkpoint(last_checkpoint_path(run.checkpoint), ckpt)
        if is_best:
            save_checkpoint(run.checkpoint, ckpt)

    bleu_fn = None
    if train_cfg.validate_bleu:
        bleu_fn = partial(dev_bleu, pairs=data.dev, src_vocab=data.src_vocab, tgt_vocab=data.tgt_vocab)

    result = train_model(
        params,
        data.train,
        data.src_vocab,
        data.tgt_vocab,
        dev_batches,
        train_cfg,
        metrics_path=run.metrics,
        bleu_fn=bleu_fn,
        on_validate=on_validate,
        show_progress=show_progress,
    )
    return result, dev_batches


# ===== Команды =====

def cmd_train(args: argparse.Namespace) -> int:
    run = run_config_from_args(args)
    data = load_datasets(run)
    result, _ = run_training(run, data, not args.no_progress)
    logger.info(f"Training finished at step {result.last_step}; best step {result.best_step} -> {run.checkpoint}")

    if data.test:
        hyps = translate_tokens(
            [p.source for p in data.test], result.best_params, data.src_vocab, data.tgt_vocab, DecodeConfig(beam_size=1)
        )
        refs = [p.target for p in data.test]
        report = bleu4([remove_bpe(h) for h in hyps], [remove_bpe(r) for r in refs])
        logger.info(f"Test: token accuracy {token_accuracy(hyps, refs):.4f}, {format_bleu(report)}")
    return 0


def _read_lines(path: str) -> List[str]:
    if path == "-":
        return sys.stdin.read().splitlines()
    with open(path, "r", encoding="utf-8") as f:
        return f.read().splitlines()


def _write_text(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def cmd_translate(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = DecodeConfig(
        beam_size=1 if args.greedy else args.beam_size,
        max_decode_len=args.max_decode_len,
        length_penalty=args.length_penalty,
        future_interpolation=args.future_interpolation,
    )
    cfg.validate()
    merges = [tuple(m) for m in ckpt.train_config.get("bpe_merges", [])]

    outputs, trace_lines = [], []
    lines = _read_lines(args.input)
    for number, line in enumerate(tqdm(lines, desc="translate", disable=args.no_progress, leave=False), start=1):
        tokens = tokenize(line)
        if merges:
            tokens = apply_bpe(tokens, merges)
        unknown = ckpt.src_vocab.unknown_tokens(tokens)
        if unknown:
            logger.warning(f"line {number}: unknown tokens mapped to <unk>: {' '.join(unknown)}")
        if not tokens:
            outputs.append("")
            continue
        src_ids = ckpt.src_vocab.encode(tokens)
        if args.trace:
            trace, ranked = trace_beam(src_ids, ckpt.params, ckpt.variant, cfg)
            trace_lines.append(format_trace(trace, ckpt.tgt_vocab, sentence=number))
            ids = ranked[0].output_ids
        else:
            ids = translate_ids(src_ids, ckpt.params, ckpt.variant, cfg)
        words = ckpt.tgt_vocab.decode(ids)
        outputs.append(" ".join(remove_bpe(words) if merges else words))

    _write_text(args.output, "".join(o + "\n" for o in outputs))
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as f:
            f.write("".join(trace_lines))
    logger.info(f"Translated {len(outputs)} lines with {ckpt.variant} (beam {cfg.beam_size})")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    hyps = _read_lines(args.hyp)
    refs = _read_lines(args.ref)
    if len(hyps) != len(refs):
        raise InputError(f"hypothesis file has {len(hyps)} lines but reference file has {len(refs)}")
    report = bleu4(hyps, refs)
    buckets = None
    if args.src:
        sources = _read_lines(args.src)
        if len(sources) != len(refs):
            raise InputError(f"source file has {len(sources)} lines but reference file has {len(refs)}")
        buckets = bucket_report_from_lists(sources, refs, hyps)

    text = format_bleu(report) + "\n"
    if buckets is not None:
        text += format_buckets(buckets)
    sys.stdout.write(text)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(report_key_values(report, buckets))
    if args.docx:
        write_docx(args.docx, evaluation_markdown(report, buckets))
    return 0


SWEEP_COLUMNS = ["lambda", "status", "best_step", "dev_ce", "dev_bleu"]


def _cell_path(path: str, label: str) -> str:
    stem, ext = os.path.splitext(path)
    return f"{stem}.{label}{ext}"


def format_sweep(rows: Sequence[dict]) -> str:
    lines = ["\t".join(SWEEP_COLUMNS)]
    for row in rows:
        lines.append(
            "\t".join(
                [
                    str(row["lambda"]),
                    row["status"],
                    "-" if row["best_step"] is None else str(row["best_step"]),
                    "-" if row["dev_ce"] is None else f"{row['dev_ce']:.6f}",
                    "-" if row["dev_bleu"] is None else f"{row['dev_bleu']:.2f}",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _sweep_cell(run: RunConfig, data: Datasets, label: str, show_progress: bool) -> dict:
    row = {"lambda": label, "status": "ok", "best_step": None, "dev_ce": None, "dev_bleu": None}
    try:
        result, dev_batches = run_training(run, data, show_progress)
        dev = evaluate_loss(dev_batches, result.best_params, run.variant, run.train_config())
        row.update(
            best_step=result.best_step,
            dev_ce=dev.ce,
            dev_bleu=dev_bleu(result.best_params, data.dev, data.src_vocab, data.tgt_vocab),
        )
    except FutureNMTError as e:
        logger.error(f"sweep cell {label} failed: {type(e).__name__}: {e}")
        row["status"] = f"failed:{type(e).__name__}"
    return row


def cmd_sweep(args: argparse.Namespace) -> int:
    run = run_config_from_args(args)
    if run.variant == "baseline":
        raise ConfigError("a lambda sweep needs the model1 or model2 variant")
    lambdas = sorted(args.lambdas)
    if any(lam < 0 for lam in lambdas):
        raise ConfigError(f"lambda values must be >= 0, got {lambdas}")
    data = load_datasets(run)

    rows = []
    for lam in lambdas:
        label = f"{lam:g}"
        logger.info(f"Sweep cell lambda={label}")
        cell = replace(
            run,
            lambda_=lam,
            checkpoint=_cell_path(run.checkpoint, f"lambda-{label}"),
            metrics=_cell_path(run.metrics, f"lambda-{label}"),
        )
        rows.append(_sweep_cell(cell, data, label, not args.no_progress))
    if args.baseline:
        cell = replace(
            run,
            variant="baseline",
            lambda_=None,
            checkpoint=_cell_path(run.checkpoint, "baseline"),
            metrics=_cell_path(run.metrics, "baseline"),
        )
        rows.append(_sweep_cell(cell, data, "baseline", not args.no_progress))

    _write_text(args.output, format_sweep(rows))
    if args.docx:
        write_docx(args.docx, sweep_markdown(rows, title=f"Lambda sweep ({run.variant})"))
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    pairs = make_synthetic(
        args.task, args.size, (args.min_len, args.max_len), args.vocab, args.seed, args.mapping_seed
    )
    write_corpus(args.output, pairs)
    logger.info(f"Wrote {len(pairs)} {args.task} pairs to {args.output}")
    return 0


# ===== Разбор аргументов =====

def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {key: getattr(args, key, None) for key in config_keys()}
    return build_run_config(file_values, overrides)


def _flag(key: str) -> str:
    return "--lambda" if key == "lambda_" else "--" + key.replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Файл конфигурации `key = value`")
    for key in config_keys():
        kwargs = {"dest": key, "default": None, "type": partial(parse_value, key)}
        if key in BOOL_KEYS:
            kwargs.update(nargs="?", const=True)
        parser.add_argument(_flag(key), **kwargs)
    parser.add_argument("--steps", dest="max_steps", type=int, default=None, help="Синоним --max-steps")


def _lambda_list(raw: str) -> List[float]:
    try:
        return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad lambda list '{raw}': {e}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="futurenmt", description="Transformer NMT with a future-cost cell")
    parser.add_argument("--verbose", action="store_true", help="Подробный лог")
    parser.add_argument("--no-progress", action="store_true", help="Без индикаторов прогресса")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Обучить модель")
    add_config_flags(train)
    train.set_defaults(func=cmd_train)

    translate = sub.add_parser("translate", help="Перевести файл")
    translate.add_argument("--checkpoint", required=True)
    translate.add_argument("--input", default="-")
    translate.add_argument("--output", default=None)
    translate.add_argument("--trace", default=None, help="Файл трассы луча")
    translate.add_argument("--greedy", action="store_true")
    translate.add_argument("--beam-size", type=int, default=4)
    translate.add_argument("--max-decode-len", type=int, default=None)
    translate.add_argument("--length-penalty", type=float, default=0.0)
    translate.add_argument("--future-interpolation", action="store_true")
    translate.set_defaults(func=cmd_translate)

    evaluate = sub.add_parser("evaluate", help="BLEU и отчёт по длинам")
    evaluate.add_argument("--hyp", required=True)
    evaluate.add_argument("--ref", required=True)
    evaluate.add_argument("--src", default=None)
    evaluate.add_argument("--report", default=None, help="Файл отчёта `key = value`")
    evaluate.add_argument("--docx", default=None)
    evaluate.set_defaults(func=cmd_evaluate)

    sweep = sub.add_parser("sweep", help="Свип по λ")
    add_config_flags(sweep)
    sweep.add_argument("--lambdas", type=_lambda_list, default=list(DEFAULT_SWEEP_LAMBDAS))
    sweep.add_argument("--baseline", action="store_true", help="Добавить строку baseline")
    sweep.add_argument("--output", default=None)
    sweep.add_argument("--docx", default=None)
    sweep.set_defaults(func=cmd_sweep)

    generate = sub.add_parser("generate", help="Записать синтетический корпус")
    generate.add_argument("--task", choices=SYNTHETIC_TASKS, required=True)
    generate.add_argument("--size", type=int, default=1000)
    generate.add_argument("--min-len", type=int, default=3)
    generate.add_argument("--max-len", type=int, default=12)
    generate.add_argument("--vocab", type=int, default=20)
    generate.add_argument("--seed", type=int, default=1)
    generate.add_argument("--mapping-seed", type=int, default=0)
    generate.add_argument("--output", required=True)
    generate.set_defaults(func=cmd_generate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except FutureNMTError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args)
    except (FutureNMTError, OSError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
