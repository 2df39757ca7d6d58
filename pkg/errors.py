"""
Исключения движка
"""


class FutureNMTError(Exception):
    """Базовая ошибка движка"""


class DimensionError(FutureNMTError, ValueError):
    """Несовместимые формы тензоров"""


class ContractError(FutureNMTError):
    """Нарушено предусловие операции"""


class InputError(FutureNMTError, ValueError):
    """Некорректные входные данные (корпус, длины, идентификаторы)"""


class TokenIndexError(FutureNMTError, IndexError):
    """Идентификатор токена вне словаря"""


class NumericalError(FutureNMTError):
    """NaN/Inf в данных тензора"""


class ConfigError(FutureNMTError):
    """Некорректная конфигурация запуска"""


class CheckpointError(FutureNMTError):
    """Чекпоинт повреждён, несовместим или не совпадает по формам"""


class TrainingDivergedError(FutureNMTError):
    """Функция потерь стала NaN/Inf во время обучения"""
