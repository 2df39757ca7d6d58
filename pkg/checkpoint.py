"""
Чекпоинты: текстовый заголовок (версия, конфиги, словари, таблица форм)
и следующие за ним little-endian float64 массивы в порядке таблицы
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from data import Vocabulary
from errors import CheckpointError, ConfigError, InputError
from tensor import Tensor
from training import OptimizerState
from transformer import ModelConfig, ModelParams, param_shapes


logger = logging.getLogger(__name__)

HEADER_END = "end"
PAYLOAD_DTYPE = np.dtype("<f8")
ADAM_PREFIXES = ("adam.m.", "adam.v.")


@dataclass
class Checkpoint:
    params: ModelParams
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    step: int = 0
    optimizer: Optional[OptimizerState] = None
    train_config: Dict[str, object] = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    @property
    def variant(self) -> str:
        return self.params.variant


def _dumps(value) -> str:
    return json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _tensor_table(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    table = [(name, t.data) for name, t in ckpt.params.items()]
    if ckpt.optimizer is not None:
        for name, _ in list(table):
            if name in ckpt.optimizer.m:
                table.append((ADAM_PREFIXES[0] + name, ckpt.optimizer.m[name]))
                table.append((ADAM_PREFIXES[1] + name, ckpt.optimizer.v[name]))
    return table


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """
    Записывает чекпоинт атомарно: сначала во временный файл, затем rename,
    так что прежний файл остаётся целым при сбое записи.
    """
    table = _tensor_table(ckpt)
    header = [
        CHECKPOINT_MAGIC,
        f"version {CHECKPOINT_VERSION}",
        f"variant {ckpt.variant}",
        f"step {ckpt.step}",
        f"seed {ckpt.params.seed}",
        f"config {_dumps(ckpt.config.to_dict())}",
        f"train_config {_dumps(ckpt.train_config)}",
        f"src_vocab {_dumps(ckpt.src_vocab.id_to_token)}",
        f"tgt_vocab {_dumps(ckpt.tgt_vocab.id_to_token)}",
        f"rng {_dumps(ckpt.params.rng.bit_generator.state)}",
        f"optimizer_step {ckpt.optimizer.step if ckpt.optimizer is not None else -1}",
        f"tensors {len(table)}",
    ]
    for name, arr in table:
        header.append(f"tensor {name} {','.join(str(d) for d in arr.shape)}")
    header.append(HEADER_END)

    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("utf-8"))
        for _, arr in table:
            f.write(np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE).tobytes())
    os.replace(tmp_path, path)
    logger.debug(f"checkpoint saved: {path} (step {ckpt.step}, {len(table)} tensors)")


def _read_header(blob: bytes) -> Tuple[Dict[str, str], List[Tuple[str, Tuple[int, ...]]], int]:
    fields_: Dict[str, str] = {}
    table: List[Tuple[str, Tuple[int, ...]]] = []
    offset = 0
    first = True
    while True:
        end = blob.find(b"\n", offset)
        if end < 0:
            raise CheckpointError("truncated checkpoint: header has no end marker")
        try:
            line = blob[offset:end].decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"not a checkpoint file (header is not UTF-8 text): {e}") from e
        offset = end + 1
        if first:
            if line != CHECKPOINT_MAGIC:
                raise CheckpointError("not a checkpoint file (bad magic line)")
            first = False
            continue
        if line == HEADER_END:
            return fields_, table, offset
        key, _, value = line.partition(" ")
        if key == "tensor":
            name, _, dims = value.rpartition(" ")
            try:
                shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            except ValueError as e:
                raise CheckpointError(f"malformed shape for tensor '{name}': {dims!r}") from e
            if not name or any(d < 0 for d in shape):
                raise CheckpointError(f"malformed tensor line: {line!r}")
            table.append((name, shape))
        else:
            fields_[key] = value


def load_checkpoint(path: str, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Читает чекпоинт и проверяет версию, таблицу форм и размер данных.

    Args:
        path: Путь к файлу
        expected_config: Если задан, формы сверяются с ним, а не только с
            конфигом из заголовка

    Raises:
        CheckpointError: неверная версия, усечённый файл или несовпадение форм
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint '{path}': {e}") from e

    fields_, table, offset = _read_header(blob)
    try:
        version = int(fields_.get("version", "-1"))
    except ValueError as e:
        raise CheckpointError(f"malformed checkpoint version: {e}") from e
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    try:
        config = ModelConfig.from_dict(json.loads(fields_["config"]))
        variant = fields_["variant"]
        declared = int(fields_["tensors"])
        seed = int(fields_.get("seed", "0"))
        step = int(fields_.get("step", "0"))
        opt_step = int(fields_.get("optimizer_step", "-1"))
        rng_state = json.loads(fields_["rng"]) if "rng" in fields_ else None
        train_config = json.loads(fields_.get("train_config", "{}"))
        src_vocab = Vocabulary(json.loads(fields_["src_vocab"]))
        tgt_vocab = Vocabulary(json.loads(fields_["tgt_vocab"]))
    except KeyError as e:
        raise CheckpointError(f"malformed checkpoint header: missing field {e}") from e
    except (ValueError, TypeError, InputError) as e:
        raise CheckpointError(f"malformed checkpoint header: {e}") from e
    if declared != len(table):
        raise CheckpointError(f"header declares {declared} tensors but lists {len(table)}")

    try:
        expected = param_shapes(expected_config or config, variant)
    except ConfigError as e:
        raise CheckpointError(f"checkpoint config is invalid: {e}") from e
    model_table = [(n, s) for n, s in table if not n.startswith(ADAM_PREFIXES)]
    for name, shape in model_table:
        want = expected.get(name)
        if want is None:
            raise CheckpointError(f"unexpected tensor '{name}' for variant {variant}")
        if tuple(want) != shape:
            raise CheckpointError(f"shape mismatch for '{name}': checkpoint {list(shape)}, model {list(want)}")
    missing = [n for n in expected if n not in dict(model_table)]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor '{missing[0]}'")

    need = sum(int(np.prod(s, dtype=np.int64)) for _, s in table) * PAYLOAD_DTYPE.itemsize
    have = len(blob) - offset
    if have != need:
        kind = "truncated" if have < need else "oversized"
        raise CheckpointError(f"{kind} checkpoint: expected {need} bytes of tensor data, found {have}")

    arrays: Dict[str, np.ndarray] = {}
    for name, shape in table:
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(blob, PAYLOAD_DTYPE, count, offset).reshape(shape).astype(np.float64)
        offset += count * PAYLOAD_DTYPE.itemsize

    tensors = {name: Tensor(arrays[name], requires_grad=True, name=name) for name, _ in model_table}
    params = ModelParams(config, variant, tensors, seed)
    if rng_state is not None:
        try:
            params.rng.bit_generator.state = rng_state
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"malformed rng state: {e}") from e

    optimizer = None
    if opt_step >= 0:
        optimizer = OptimizerState(step=opt_step)
        for name, arr in arrays.items():
            if name.startswith(ADAM_PREFIXES[0]):
                optimizer.m[name[len(ADAM_PREFIXES[0]):]] = arr
            elif name.startswith(ADAM_PREFIXES[1]):
                optimizer.v[name[len(ADAM_PREFIXES[1]):]] = arr

    return Checkpoint(
        params=params,
        src_vocab=src_vocab,
        tgt_vocab=tgt_vocab,
        step=step,
        optimizer=optimizer,
        train_config=train_config,
    )
