"""
Конфигурация запуска: пресеты, файл `key = value` и флаги командной строки.
Приоритет: пресет < файл < флаги.
"""

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List, Optional

from config import DEFAULT_PRESET, PRESETS, SYNTHETIC_TASKS, VARIANTS
from decoding import DecodeConfig
from errors import ConfigError
from training import TrainConfig
from transformer import ModelConfig


logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """
    Всё, что нужно командам: модель, обучение, декодирование и пути.
    Поля со значением None берутся из пресета.
    """
    preset: str = DEFAULT_PRESET
    variant: str = "model2"
    seed: int = 1

    # данные
    task: Optional[str] = None
    task_size: int = 8000
    dev_size: int = 500
    test_size: int = 500
    task_min_len: int = 3
    task_max_len: int = 12
    task_vocab: int = 20
    mapping_seed: int = 0
    corpus: Optional[str] = None
    dev: Optional[str] = None
    test: Optional[str] = None
    bpe_merges: int = 0
    min_count: int = 1

    # выходные файлы
    checkpoint: str = "model.ckpt"
    metrics: str = "metrics.tsv"

    # модель
    d_model: Optional[int] = None
    d_ffn: Optional[int] = None
    n_heads: Optional[int] = None
    n_layers: Optional[int] = None
    dropout: Optional[float] = None
    use_positions: bool = True
    tie_output_embedding: bool = False
    future_bias: bool = False
    separate_future_embedding: bool = False
    future_dropout: bool = False

    # обучение
    lambda_: Optional[float] = None
    label_smoothing: Optional[float] = None
    warmup_steps: Optional[int] = None
    max_steps: Optional[int] = None
    batch_size: Optional[int] = None
    lr_factor: Optional[float] = None
    validate_every: Optional[int] = None
    smooth_future: bool = True
    include_f0_loss: bool = False
    stop_gradient: bool = False
    validate_bleu: bool = False
    select_by: str = "loss"

    # декодирование
    beam_size: int = 4
    max_decode_len: Optional[int] = None
    length_penalty: float = 0.0
    future_interpolation: bool = False

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset '{self.preset}' (choose from {', '.join(PRESETS)})")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}' (choose from {', '.join(VARIANTS)})")
        if self.variant == "baseline" and self.lambda_ is not None:
            raise ConfigError("lambda has no effect on the baseline variant")
        if self.variant == "baseline" and (self.include_f0_loss or self.stop_gradient or self.future_interpolation):
            raise ConfigError("future-cost options need the model1 or model2 variant")
        if self.task is not None and self.task not in SYNTHETIC_TASKS:
            raise ConfigError(f"unknown task '{self.task}' (choose from {', '.join(SYNTHETIC_TASKS)})")
        if self.task is not None and self.corpus is not None:
            raise ConfigError("give either a synthetic task or a corpus, not both")
        if self.task_min_len < 1 or self.task_max_len < self.task_min_len:
            raise ConfigError(f"bad task length range [{self.task_min_len}, {self.task_max_len}]")
        if self.corpus is not None and self.dev is None:
            raise ConfigError("a corpus needs a dev file for validation")
        self.model_config(1, 1).validate()
        self.train_config().validate()
        self.decode_config().validate()

    def resolved(self) -> "RunConfig":
        """Копия, в которой все поля None заполнены из пресета"""
        preset = PRESETS[self.preset] if self.preset in PRESETS else {}
        updates = {k: v for k, v in preset.items() if getattr(self, k) is None}
        if self.variant == "baseline":
            updates.pop("lambda_", None)
        return replace(self, **updates)

    def _value(self, name: str):
        value = getattr(self, name)
        return PRESETS.get(self.preset, PRESETS[DEFAULT_PRESET])[name] if value is None else value

    def model_config(self, src_vocab_size: int, tgt_vocab_size: int) -> ModelConfig:
        return ModelConfig(
            src_vocab_size=src_vocab_size,
            tgt_vocab_size=tgt_vocab_size,
            d_model=self._value("d_model"),
            d_ffn=self._value("d_ffn"),
            n_heads=self._value("n_heads"),
            n_layers=self._value("n_layers"),
            dropout=self._value("dropout"),
            use_positions=self.use_positions,
            tie_output_embedding=self.tie_output_embedding,
            future_bias=self.future_bias,
            separate_future_embedding=self.separate_future_embedding,
            future_dropout=self.future_dropout,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            variant=self.variant,
            lambda_=0.0 if self.variant == "baseline" else self._value("lambda_"),
            label_smoothing=self._value("label_smoothing"),
            smooth_future=self.smooth_future,
            warmup_steps=self._value("warmup_steps"),
            lr_factor=self._value("lr_factor"),
            max_steps=self._value("max_steps"),
            batch_size=self._value("batch_size"),
            seed=self.seed,
            validate_every=self._value("validate_every"),
            validate_bleu=self.validate_bleu,
            select_by=self.select_by,
            include_f0_loss=self.include_f0_loss,
            stop_gradient=self.stop_gradient,
        )

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(
            beam_size=self.beam_size,
            max_decode_len=self.max_decode_len,
            length_penalty=self.length_penalty,
            future_interpolation=self.future_interpolation,
        )

    def to_dict(self) -> dict:
        return asdict(self)


# ===== Файл конфигурации =====

_INT_KEYS = {
    "seed", "task_size", "dev_size", "test_size", "task_min_len", "task_max_len", "task_vocab",
    "mapping_seed", "bpe_merges", "min_count", "d_model", "d_ffn", "n_heads", "n_layers",
    "warmup_steps", "max_steps", "batch_size", "validate_every", "beam_size", "max_decode_len",
}
_FLOAT_KEYS = {"dropout", "lambda_", "label_smoothing", "lr_factor", "length_penalty"}
BOOL_KEYS = {
    "use_positions", "tie_output_embedding", "future_bias", "separate_future_embedding", "future_dropout",
    "smooth_future", "include_f0_loss", "stop_gradient", "validate_bleu", "future_interpolation",
}
_ALIASES = {"lambda": "lambda_"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def config_keys() -> List[str]:
    return [f.name for f in fields(RunConfig)]


def parse_value(key: str, raw: str):
    """Преобразует строковое значение по типу поля RunConfig"""
    raw = raw.strip()
    try:
        if key in BOOL_KEYS:
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"'{raw}' is not a boolean")
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for '{key}': {e}") from e
    return raw


def load_config_file(path: str) -> Dict[str, object]:
    """
    Читает файл `key = value` (комментарии с `#`).

    Raises:
        ConfigError: файл не читается, строка без `=` или неизвестный ключ
    """
    known = set(config_keys())
    values: Dict[str, object] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file '{path}': {e}") from e

    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{number}: expected 'key = value'")
        key = key.strip().replace("-", "_")
        key = _ALIASES.get(key, key)
        if key not in known:
            raise ConfigError(f"{path}:{number}: unknown key '{key}'")
        values[key] = parse_value(key, raw)
    return values


def build_run_config(file_values: Optional[Dict[str, object]] = None, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    """Собирает RunConfig: значения по умолчанию, затем файл, затем флаги"""
    merged: Dict[str, object] = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(merged) - set(config_keys())
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    run = RunConfig(**merged)
    run.validate()
    return run
