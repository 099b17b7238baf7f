"""Dense float64 matrices with tape-based reverse-mode differentiation.

Every value is a 2-D array. Operations executed inside an active
:class:`Tape` are recorded together with their local backward rule;
:func:`backward` replays them in reverse order. Outside a tape the same
operations run as plain numpy with no bookkeeping, which is what the
evaluation path uses.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside an operation's domain."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got ndim={arr.ndim}")
        if arr.size == 0:
            raise DimensionError(f"empty tensor of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None and self.grad.shape == self.data.shape:
            self.grad.fill(0.0)
        else:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    @property
    def T(self) -> Tensor:
        return transpose(self)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], None]


_state = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; the tape is thread-local so independent
    models may train concurrently on separate threads.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> Tape:
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _record(out: Tensor, inputs: tuple[Tensor, ...], rule: Callable[[np.ndarray], None]) -> Tensor:
    tape = _active_tape()
    if tape is not None and _needs_grad(*inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, inputs, rule))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Write d(loss)/d(x) into ``x.grad`` for every tensor on the tape.

    Gradients of every taped tensor and of ``params`` are reset first, so
    parameters not reached from ``loss`` end up holding zeros.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    keep = set()
    for p in params:
        p.zero_grad()
        keep.add(id(p))
    for rec in tape.records:
        rec.out.grad = None
        for t in rec.inputs:
            if id(t) not in keep:
                t.grad = None
    loss.grad = np.ones((1, 1))
    for rec in reversed(tape.records):
        if rec.out.grad is not None:
            rec.backward(rec.out.grad)


# --------------------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape} (inner dims differ)")
    out = Tensor(a.data @ b.data)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _record(out, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    out = Tensor(a.data + b.data)

    def rule(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _record(out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    out = Tensor(a.data - b.data)

    def rule(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _record(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    out = Tensor(a.data * b.data)

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _record(out, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: _accumulate(a, g * c))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1xC row vector to every row of an RxC matrix."""
    if bias.rows != 1 or bias.cols != x.cols:
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    out = Tensor(x.data + bias.data)

    def rule(g):
        _accumulate(x, g)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0, keepdims=True))

    return _record(out, (x, bias), rule)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0))
    # subgradient 0 at exactly zero
    return _record(out, (a,), lambda g: _accumulate(a, g * mask))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: _accumulate(a, g * y * (1.0 - y)))


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(x))`` computed without overflow; derivative is sigmoid(x)."""
    x = a.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))
    return _record(out, (a,), lambda g: _accumulate(a, g * _sigmoid(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: _accumulate(a, g * y))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    x = a.data
    out = Tensor(np.log(x))
    return _record(out, (a,), lambda g: _accumulate(a, g / x))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where no clipping happened."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = Tensor(np.clip(a.data, lo, hi))
    return _record(out, (a,), lambda g: _accumulate(a, g * inside))


_ELEMENTWISE = {
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "add": add,
    "mul": mul,
    "sub": sub,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``elementwise("tanh", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def softmax(scores: Tensor) -> Tensor:
    """Softmax down a column vector (Mx1), max-shifted for stability."""
    if scores.cols != 1:
        raise DimensionError(f"softmax expects a column vector, got {scores.shape}")
    z = scores.data - scores.data.max()
    e = np.exp(z)
    p = e / e.sum()
    out = Tensor(p)

    def rule(g):
        _accumulate(scores, p * (g - float((g * p).sum())))

    return _record(out, (scores,), rule)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T.copy())
    return _record(out, (a,), lambda g: _accumulate(a, g.T.copy()))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")
    shape = a.shape
    out = Tensor(a.data.reshape(rows, cols).copy())
    return _record(out, (a,), lambda g: _accumulate(a, g.reshape(shape).copy()))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join along columns (axis=1) or rows (axis=0)."""
    if not tensors:
        raise DimensionError("concat of nothing")
    other = 1 - axis
    ref = tensors[0].shape[other]
    for t in tensors:
        if t.shape[other] != ref:
            raise DimensionError(f"concat: {[t.shape for t in tensors]} along axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, (g[:, lo:hi] if axis == 1 else g[lo:hi, :]).copy())

    return _record(out, tuple(tensors), rule)


def minmax_scale(a: Tensor) -> Tensor:
    """Rescale a row vector onto [0, 1] by its own min and max (constant rows map to 0)."""
    if a.rows != 1:
        raise DimensionError(f"minmax_scale expects a row vector, got {a.shape}")
    x = a.data[0]
    lo, hi = int(np.argmin(x)), int(np.argmax(x))
    span = x[hi] - x[lo]
    if span <= 0.0:
        out = Tensor(np.zeros_like(a.data))
        return _record(out, (a,), lambda g: None)
    y = (x - x[lo]) / span
    out = Tensor(y.reshape(1, -1))

    def rule(g):
        gv = g[0]
        gy = float(gv @ y)
        dx = gv / span
        dx[lo] += (gy - gv.sum()) / span
        dx[hi] -= gy / span
        _accumulate(a, dx.reshape(1, -1))

    return _record(out, (a,), rule)


def take(a: Tensor, row: int, col: int) -> Tensor:
    """Select one entry as a 1x1 tensor."""
    out = Tensor(a.data[row, col])

    def rule(g):
        full = np.zeros_like(a.data)
        full[row, col] = g[0, 0]
        _accumulate(a, full)

    return _record(out, (a,), rule)


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: _accumulate(a, np.full_like(a.data, g[0, 0])))


def cumprod(a: Tensor) -> Tensor:
    """Running product along a row vector."""
    if a.rows != 1:
        raise DimensionError(f"cumprod expects a row vector, got {a.shape}")
    x = a.data[0]
    y = np.cumprod(x)
    out = Tensor(y)

    def rule(g):
        gv = g[0]
        n = x.size
        left = np.concatenate(([1.0], np.cumprod(x[:-1])))
        dx = np.empty(n)
        for k in range(n):
            # d y_j / d x_k = prod_{i<=j, i!=k} x_i for j >= k
            run = left[k]
            acc = gv[k] * run
            for j in range(k + 1, n):
                run *= x[j]
                acc += gv[j] * run
            dx[k] = acc
        _accumulate(a, dx.reshape(1, n))

    return _record(out, (a,), rule)


def kron(a: Tensor, b: Tensor) -> Tensor:
    """Flattened outer product of two row vectors: 1x(n*m)."""
    if a.rows != 1 or b.rows != 1:
        raise DimensionError(f"kron expects row vectors, got {a.shape} and {b.shape}")
    n, m = a.cols, b.cols
    out = Tensor(np.outer(a.data[0], b.data[0]).reshape(1, n * m))

    def rule(g):
        G = g.reshape(n, m)
        if a.requires_grad:
            _accumulate(a, (G @ b.data[0]).reshape(1, n))
        if b.requires_grad:
            _accumulate(b, (a.data[0] @ G).reshape(1, m))

    return _record(out, (a, b), rule)


def append_one(a: Tensor) -> Tensor:
    """Append a constant 1 to a row vector."""
    return concat([a, Tensor(np.ones((1, 1)))], axis=1)


# --------------------------------------------------------------------------- ADAM


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, **hyper) -> AdamState:
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_step(state: AdamState, param: Tensor) -> Tensor:
    """One bias-corrected ADAM update, in place on ``param.data``."""
    if param.grad is None:
        raise ContractError(f"adam_step: {param!r} has no gradient")
    g = param.grad
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    step = state.lr / (1.0 - state.beta1 ** state.t)
    denom = np.sqrt(state.v / (1.0 - state.beta2 ** state.t))
    denom += state.epsilon
    param.data -= step * state.m / denom
    return param


class Adam:
    """ADAM over a fixed parameter list, updated as one flat buffer.

    Parameter values and gradients are re-homed into contiguous arrays so a
    step costs a handful of vectorized passes regardless of how many tensors
    the model has. The update is the same as :func:`adam_step`.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.t = 0
        sizes = [p.size for p in self.params]
        n = int(sum(sizes))
        self.flat = np.empty(n)
        self.flat_grad = np.zeros(n)
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self._scratch = np.empty(n)
        self._views = []
        offset = 0
        for p, size in zip(self.params, sizes):
            shape = p.shape
            self.flat[offset:offset + size] = p.data.ravel()
            p.data = self.flat[offset:offset + size].reshape(shape)
            p.grad = self.flat_grad[offset:offset + size].reshape(shape)
            self._views.append(p.grad)
            offset += size

    def zero_grad(self) -> None:
        self.flat_grad.fill(0.0)
        for p, view in zip(self.params, self._views):
            p.grad = view

    def step(self) -> None:
        for p, view in zip(self.params, self._views):
            if p.grad is None:
                raise ContractError(f"adam step: {p!r} has no gradient")
            if p.grad is not view:
                view[...] = p.grad
                p.grad = view
        g, m, v, tmp = self.flat_grad, self.m, self.v, self._scratch
        self.t += 1
        m *= self.beta1
        np.multiply(g, 1.0 - self.beta1, out=tmp)
        m += tmp
        v *= self.beta2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - self.beta2
        v += tmp
        step = self.lr / (1.0 - self.beta1 ** self.t)
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(1.0 - self.beta2 ** self.t)
        tmp += self.epsilon
        np.divide(m, tmp, out=tmp)
        tmp *= step
        self.flat -= tmp
