"""
Плотный тензор с обратным автоматическим дифференцированием
Все вычисления в float64, граф записывается лентой операций
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import DEBUG_CHECKS, MASK_BIAS
from errors import ContractError, DimensionError, NumericalError, TokenIndexError


logger = logging.getLogger(__name__)

# Порядковый номер создания узла: порядок исполнения = топологический порядок
_sequence = itertools.count()

# Режим записи градиентов хранится отдельно для каждого потока
_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Отключает запись ленты в текущем потоке (инференс, численные проверки)"""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """
    Плотный n-мерный массив float64 с записью градиентов.

    Листовые тензоры создаются конструктором, промежуточные - операциями.
    Градиент листа накапливается в `grad` после `backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_leaf", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_sequence)
        self._leaf = True
        self._consumed = False
        self.op = "leaf"

    # ===== Свойства =====

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        """Та же память, без записи градиента (stop-gradient)"""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._parents = ()
        out._backward = None
        out._seq = next(_sequence)
        out._leaf = True
        out._consumed = False
        out.op = "detach"
        return out

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{label}, op={self.op}, requires_grad={self.requires_grad})"

    # ===== Арифметика =====

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(_lift(other), self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(_lift(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(_lift(other), self)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    # ===== Методы-обёртки =====

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def backward(self, leaves: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, leaves)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    """Создаёт выходной узел и записывает его на ленту, если нужен градиент"""
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")

    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_sequence)
    out._leaf = False
    out._consumed = False
    out.op = op
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ===== Правило broadcasting =====

def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...], op: str = "elementwise") -> Tuple[int, ...]:
    """
    Трейлинговое расширение: формы выравниваются по правому краю,
    недостающие ведущие оси добавляются, а размер 1 допускается только
    в последней оси. Всё остальное - DimensionError.
    """
    a, b = tuple(a), tuple(b)
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    n = max(len(a), len(b))
    pa = (None,) * (n - len(a)) + a
    pb = (None,) * (n - len(b)) + b
    for axis in range(n):
        da, db = pa[axis], pb[axis]
        if da is None or db is None or da == db:
            continue
        if axis == n - 1 and (da == 1 or db == 1):
            continue
        raise DimensionError(
            f"{op}: cannot broadcast shapes {list(a)} and {list(b)} "
            f"(only trailing-dimension expansion is supported)"
        )
    return tuple(np.broadcast_shapes(a, b))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Суммирует градиент обратно к форме операнда"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ===== Поэлементные операции =====

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    broadcast_shape(a.shape, b.shape, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    broadcast_shape(a.shape, b.shape, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    broadcast_shape(a.shape, b.shape, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    broadcast_shape(a.shape, b.shape, "div")

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), grad_fn, "div")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0

    def grad_fn(g):
        return (g * keep,)

    return _result(np.where(keep, x.data, 0.0), (x,), grad_fn, "relu")


def _stable_sigmoid(values: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(values))
    return np.where(values >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), grad_fn, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _result(out, (x,), grad_fn, "tanh")


def interpolate(gate, a, b) -> Tensor:
    """
    gate ⊙ a + (1 − gate) ⊙ b для gate в [0, 1].
    Результат не выходит за [min(a, b), max(a, b)] и после округления.
    """
    gate, a, b = _lift(gate), _lift(a), _lift(b)
    shape = broadcast_shape(broadcast_shape(gate.shape, a.shape, "interpolate"), b.shape, "interpolate")
    mixed = gate.data * a.data + (1.0 - gate.data) * b.data
    out = np.clip(mixed, np.minimum(a.data, b.data), np.maximum(a.data, b.data))

    def grad_fn(g):
        return (
            _unbroadcast(g * (a.data - b.data), gate.shape),
            _unbroadcast(g * gate.data, a.shape),
            _unbroadcast(g * (1.0 - gate.data), b.shape),
        )

    return _result(np.broadcast_to(out, shape).copy(), (gate, a, b), grad_fn, "interpolate")


def elementwise(kind: str, *operands) -> Tensor:
    """Диспетчер поэлементных операций: add, mul, relu, sigmoid, tanh"""
    binary = {"add": add, "mul": mul}
    unary = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
    if kind in binary:
        if len(operands) != 2:
            raise ContractError(f"{kind} expects 2 operands, got {len(operands)}")
        return binary[kind](*operands)
    if kind in unary:
        if len(operands) != 1:
            raise ContractError(f"{kind} expects 1 operand, got {len(operands)}")
        return unary[kind](_lift(operands[0]))
    raise ContractError(f"unknown elementwise kind: {kind}")


# ===== Линейная алгебра =====

def _pad_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Дополняет ось нулями до длины 2"""
    if x.shape[axis] >= 2:
        return x
    widths = [(0, 0)] * x.ndim
    widths[axis] = (0, 2 - x.shape[axis])
    return np.pad(x, widths)


def _matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    np.matmul, всегда через gemm: строка префикса при декодировании и та же
    строка полного батча при обучении дают побитово одинаковый результат.
    Операнды с одной строкой или одним столбцом numpy отдал бы в gemv.
    """
    m, n = a.shape[-2], b.shape[-1]
    if b.ndim == 2:
        flat = a.reshape(-1, a.shape[-1])
        rows = flat.shape[0]
        out = np.matmul(_pad_axis(flat, 0), _pad_axis(b, 1))[:rows, :n]
        return np.ascontiguousarray(out).reshape(a.shape[:-1] + (n,))
    out = np.matmul(_pad_axis(a, -2), _pad_axis(b, -1))[..., :m, :n]
    return np.ascontiguousarray(out)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Матричное произведение [..., m, k] x [k, n] или [..., m, k] x [..., k, n].

    Args:
        a: Левый операнд (не менее 2 осей)
        b: Правый операнд; либо матрица, либо с теми же ведущими осями

    Returns:
        Тензор [..., m, n]
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not align")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {list(a.shape)} and {list(b.shape)} differ")

    def grad_fn(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k, n = b.shape
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return grad_a, grad_b

    return _result(_matmul_data(a.data, b.data), (a, b), grad_fn, "matmul")


# ===== Редукции и формы =====

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[ax] for ax in axes]))
    return reduce_sum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape

    def grad_fn(g):
        return (g.reshape(original),)

    return _result(x.data.reshape(shape), (x,), grad_fn, "reshape")


def transpose(x: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), grad_fn, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), grad_fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


# ===== Нормировки =====

def _running_total(x: np.ndarray, axis: int) -> np.ndarray:
    """Сумма по оси слева направо: хвост из точных нулей её не меняет"""
    return np.take(np.cumsum(x, axis=axis), [-1], axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax с вычитанием максимума"""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out = exps / _running_total(exps, axis)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), grad_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Совмещённый log-softmax для функций потерь (без вычитательной отмены)"""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(_running_total(np.exp(shifted), axis))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), grad_fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    LN(x) = gain ⊙ (x − mean) / sqrt(var + eps) + bias по последней оси.
    """
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {list(gain.shape)} / bias {list(bias.shape)} do not match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normalized = centered * inv
    out = normalized * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        d_norm = g * gain.data
        grad_x = inv * (
            d_norm
            - d_norm.mean(axis=-1, keepdims=True)
            - normalized * (d_norm * normalized).mean(axis=-1, keepdims=True)
        )
        return grad_x, (g * normalized).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), grad_fn, "layer_norm")


# ===== Индексация и маски =====

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """
    Выбор строк таблицы эмбеддингов.

    Args:
        table: Матрица [V, d]
        ids: Целочисленный массив идентификаторов любой формы

    Returns:
        Тензор [*ids.shape, d]; градиент рассеивается только в выбранные строки
    """
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    bad = ids[(ids < 0) | (ids >= vocab)]
    if bad.size:
        raise TokenIndexError(f"token id {int(bad.reshape(-1)[0])} out of range [0, {vocab})")

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), grad_fn, "embedding")


def add_mask_bias(scores: Tensor, blocked: np.ndarray) -> Tensor:
    """Добавляет MASK_BIAS в запрещённые позиции до softmax"""
    bias = np.where(blocked, MASK_BIAS, 0.0)
    out = scores.data + bias
    if out.shape != scores.shape:
        raise DimensionError(f"mask {list(np.shape(blocked))} widens scores {list(scores.shape)}")

    def grad_fn(g):
        return (g,)

    return _result(out, (scores,), grad_fn, "mask")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; маска генерируется из переданного seeded-генератора и хранится на ленте"""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def grad_fn(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), grad_fn, "dropout")


# ===== Лента и обратный проход =====

@dataclass
class GradTape:
    """Упорядоченная запись выполненных операций графа одной функции потерь"""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, loss: Tensor) -> "GradTape":
        seen = set()
        nodes = []
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        # порядок исполнения совпадает с топологическим
        nodes.sort(key=lambda n: n._seq)
        return cls(nodes=nodes)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n._leaf]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> GradTape:
    """
    Обратный проход: d loss / d leaf для каждого листа с requires_grad.

    Args:
        loss: Скалярный тензор, связанный с записанным графом
        leaves: Листья, которые получают нулевой градиент, если не участвуют в графе

    Returns:
        Использованная лента (граф после прохода освобождается)
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        if loss._consumed:
            raise ContractError("graph already consumed by a previous backward pass")
        raise ContractError("loss is not connected to any tensor that requires grad")

    tape = GradTape.record(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    # одна обратная передача на записанный граф
    for node in tape.nodes:
        if not node._leaf:
            node._backward = None
            node._parents = ()
            node.requires_grad = False
            node._consumed = True

    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    return tape


# ===== Численная проверка градиентов =====

@dataclass
class GradCheckReport:
    """Максимальная относительная ошибка по каждому параметру"""

    errors: Dict[str, float]
    tol: float

    @property
    def failures(self) -> List[str]:
        return [name for name, err in self.errors.items() if not err < self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """
    Сравнивает аналитические градиенты с центральными разностями.

    Args:
        f: Детерминированная функция без аргументов, возвращающая скаляр
        params: Имя -> листовой тензор
        h: Шаг разности
        tol: Допуск относительной ошибки

    Returns:
        GradCheckReport; отчёт несёт список провалов, исключений нет
    """
    for p in params.values():
        p.grad = None
    backward(f(), leaves=list(params.values()))

    errors = {}
    for name, p in params.items():
        analytic = p.grad.reshape(-1).copy()
        numeric = np.zeros_like(analytic)
        flat = p.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                plus = f().item()
                flat[i] = original - h
                minus = f().item()
                flat[i] = original
                numeric[i] = (plus - minus) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        errors[name] = float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
        logger.debug(f"gradcheck {name}: max rel err {errors[name]:.3e}")
    return GradCheckReport(errors=errors, tol=tol)
