"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations an MLP needs are provided: matmul, a handful of
elementwise maps, reductions and the two training losses.  Every operation
whose inputs require gradients appends a record to the active :class:`Tape`
of the calling thread; :func:`backward` replays that tape in reverse.

Typical use::

    with Tape() as tape:
        loss = mse(model(x), y)
        tape.backward(loss)
"""

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

BCE_EPS = 1e-7

_local = threading.local()


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{where}: non-finite values")
    return arr


class Tensor:
    """Row-major float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        self.data = _check_finite(arr, "Tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.is_leaf = True
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    grad_fn: Callable
    name: str


@dataclass(eq=False)
class Tape:
    """Ordered log of differentiable operations.

    Records are appended in execution order, so the list is already a
    topological order of the graph.
    """

    records: list = field(default_factory=list)

    def __post_init__(self):
        self._pos = {}

    def record(self, out: Tensor, inputs: Sequence[Tensor], grad_fn, name: str) -> None:
        out._tape = self
        self._pos[id(out)] = len(self.records)
        self.records.append(_Record(out, tuple(inputs), grad_fn, name))

    def reset(self) -> None:
        for rec in self.records:
            rec.out._tape = None
        self.records.clear()
        self._pos.clear()

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def backward(self, output: Tensor) -> None:
        if output.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        seed = np.ones_like(output.data)
        if output.is_leaf:
            if output.requires_grad:
                _accumulate(output, seed)
            return
        pos = self._pos.get(id(output))
        if pos is None or self.records[pos].out is not output:
            raise ContractError("backward: output was not recorded on this tape")
        pending = {id(output): seed}
        for rec in reversed(self.records[: pos + 1]):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, ig in zip(rec.inputs, rec.grad_fn(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    _accumulate(inp, ig)
                else:
                    key = id(inp)
                    pending[key] = pending[key] + ig if key in pending else ig


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
    return stack


def current_tape() -> Tape:
    return _stack()[-1]


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = _check_finite(np.asarray(g, dtype=np.float64).reshape(t.shape), "gradient")
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(output: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``output`` depends on."""
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if output.is_leaf:
        current_tape().backward(output)
        return
    if output._tape is None:
        raise ContractError("backward: output is not connected to a tape")
    output._tape.backward(output)


class no_grad:
    """Context in which no operation is recorded, whatever ``requires_grad`` says."""

    def __enter__(self):
        _local.paused = getattr(_local, "paused", 0) + 1
        return self

    def __exit__(self, *exc):
        _local.paused -= 1
        return False


def _recording() -> bool:
    return not getattr(_local, "paused", 0)


def _make(arr: np.ndarray, inputs, grad_fn, name: str) -> Tensor:
    out = Tensor._wrap(_check_finite(arr, name))
    if any(t.requires_grad for t in inputs) and _recording():
        out.requires_grad = True
        out.is_leaf = False
        current_tape().record(out, inputs, grad_fn, name)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        )

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


def _bias_compatible(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may also be a row vector broadcast over ``a``'s rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if _bias_compatible(a, b):
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add")
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def _logistic(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _logistic(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tensor_sum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size
    return _make(
        np.asarray(a.data.sum() / n), (a,), lambda g: (np.broadcast_to(g / n, shape),), "mean"
    )


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "relu": relu,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -------------------------------------------------------------------- losses


def mse(prediction: Tensor, target) -> Tensor:
    prediction, target = _as_tensor(prediction), _as_tensor(target)
    _same_shape(prediction, target, "mse")
    diff = prediction.data - target.data
    n = diff.size

    def grad_fn(g):
        d = g * 2.0 * diff / n
        return d, -d

    return _make(np.asarray((diff * diff).sum() / n), (prediction, target), grad_fn, "mse")


def bce(prediction: Tensor, target, weights=None) -> Tensor:
    """Binary cross-entropy, mean-reduced.

    ``weights`` (same shape, summing to one) replaces the uniform 1/n mean.
    Predictions are clamped to [1e-7, 1 - 1e-7] before the log; values outside
    [0, 1] are rejected.
    """
    prediction, target = _as_tensor(prediction), _as_tensor(target)
    _same_shape(prediction, target, "bce")
    p_raw, t = prediction.data, target.data
    if (p_raw < 0).any() or (p_raw > 1).any():
        raise NumericError("bce: predictions outside [0, 1]")
    if not np.isin(t, (0.0, 1.0)).all():
        raise NumericError("bce: targets must be 0 or 1")
    if weights is None:
        w = np.full(p_raw.shape, 1.0 / p_raw.size)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(p_raw.shape)
    p = np.clip(p_raw, BCE_EPS, 1.0 - BCE_EPS)
    per_sample = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    value = np.asarray((w * per_sample).sum())

    def grad_fn(g):
        return g * w * ((1.0 - t) / (1.0 - p) - t / p), None

    return _make(value, (prediction, target), grad_fn, "bce")


def loss(kind: str, prediction: Tensor, target, **kwargs) -> Tensor:
    if kind == "mse":
        return mse(prediction, target)
    if kind == "bce":
        return bce(prediction, target, **kwargs)
    raise ContractError(f"unknown loss kind {kind!r}")


# ----------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"adam: parameter {i} {p.shape} has no gradient")
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            _check_finite(p.data, "adam step")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
