# Конфигурация движка перевода с механизмом future cost

import os

# Зарезервированные идентификаторы словаря
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"
UNK_TOKEN = "<unk>"

RESERVED_TOKENS = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN]

# Максимальная длина последовательности (источник и цель)
MAX_SEQ_LEN = 64

# Аддитивное смещение для замаскированных позиций внимания
MASK_BIAS = -1e9

# Проверка NaN/Inf после каждой операции тензора (отладочный режим)
DEBUG_CHECKS = os.environ.get("FUTURENMT_DEBUG", "") == "1"

# Варианты модели
VARIANTS = ("baseline", "model1", "model2")

# Синтетические задачи
SYNTHETIC_TASKS = ("copy", "reverse", "map")

# Формат логов (как у точки входа)
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Формат чекпоинта
CHECKPOINT_MAGIC = "FUTURENMT-CHECKPOINT"
CHECKPOINT_VERSION = 1

# Порядок колонок журнала метрик (TSV)
METRICS_COLUMNS = [
    "step",
    "lr",
    "train_ce",
    "train_future",
    "train_joint",
    "dev_ce",
    "dev_future",
    "dev_joint",
    "dev_bleu",
]

# Границы корзин по длине источника: (0,10], (10,20], ..., (50,∞)
BUCKET_EDGES = [10, 20, 30, 40, 50]

# Сетка λ по умолчанию для свипа
DEFAULT_SWEEP_LAMBDAS = [0.1, 0.3, 0.5, 0.7, 0.9]

# Пресеты гиперпараметров
PRESETS = {
    # Настольный масштаб: сходимость за минуты на одном ядре
    "desk": {
        "d_model": 64,
        "d_ffn": 128,
        "n_heads": 2,
        "n_layers": 2,
        "dropout": 0.1,
        "label_smoothing": 0.1,
        "warmup_steps": 400,
        "max_steps": 3000,
        "batch_size": 64,
        "lambda_": 0.7,
        "lr_factor": 0.5,
        "validate_every": 250,
    },
    # Trans.base: 512/2048/8/6, ε=0.1, warmup 8000
    "paper": {
        "d_model": 512,
        "d_ffn": 2048,
        "n_heads": 8,
        "n_layers": 6,
        "dropout": 0.1,
        "label_smoothing": 0.1,
        "warmup_steps": 8000,
        "max_steps": 300000,
        "batch_size": 64,
        "lambda_": 0.7,
        "lr_factor": 1.0,
        "validate_every": 2000,
    },
    # Trans.big
    "big": {
        "d_model": 1024,
        "d_ffn": 4096,
        "n_heads": 16,
        "n_layers": 6,
        "dropout": 0.3,
        "label_smoothing": 0.1,
        "warmup_steps": 8000,
        "max_steps": 300000,
        "batch_size": 64,
        "lambda_": 0.7,
        "lr_factor": 1.0,
        "validate_every": 2000,
    },
}

DEFAULT_PRESET = "desk"

# Параметры Adam по умолчанию
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-9
