"""Dense tensors with tape-based reverse-mode differentiation.

Every op computes its value eagerly with numpy. When a :class:`Tape` is active
and at least one input requires a gradient, the op appends a node holding its
forward function and its vector-Jacobian product, so that :meth:`Tape.backward`
can walk the recording in reverse.

Storage is float32 by default. Ops preserve the dtype of their inputs, which
lets gradient checks run the same graph in float64.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5


class NonFiniteError(ValueError):
    """Raised when external data containing NaN or Inf is wrapped."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swap_last(self):
        return swap_last(self)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    """Wrap external data, rejecting NaN and Inf."""
    t = Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError("tensor data contains NaN or Inf")
    return t


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(x, dtype=dtype))


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Linear recording of differentiable ops, replayed in reverse by backward."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def leaves(self) -> list[Tensor]:
        produced = {id(n.output) for n in self.nodes}
        seen: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def replay(self) -> list[np.ndarray]:
        """Recompute every node's value from its recorded inputs."""
        return [n.forward(*(t.data for t in n.inputs)) for n in self.nodes]

    def backward(self, output: Tensor) -> dict[int, np.ndarray]:
        if output.data.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        leaves = self.leaves()
        for leaf in leaves:
            leaf.grad = np.zeros_like(leaf.data)
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for leaf in leaves:
            g = grads.get(id(leaf))
            if g is not None:
                leaf.grad = leaf.grad + g.astype(leaf.data.dtype, copy=False)
        return {id(leaf): leaf.grad for leaf in leaves}


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad():
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def backward(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(output)


def _op(name: str, inputs: Sequence[Tensor], fwd: Callable[..., np.ndarray], vjp_factory) -> Tensor:
    """Run ``fwd`` on input data and record a node if a gradient is needed.

    ``vjp_factory(out_data, *in_data)`` returns the vjp closure; it is only
    built when recording.
    """
    in_data = [t.data for t in inputs]
    out_data = fwd(*in_data)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=needs)
    if needs:
        tape.record(Node(name, tuple(inputs), out, fwd, vjp_factory(out_data, *in_data)))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _op("add", (a, b), np.add,
               lambda out, x, y: lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _op("sub", (a, b), np.subtract,
               lambda out, x, y: lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _op("mul", (a, b), np.multiply,
               lambda out, x, y: lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _op("div", (a, b), np.divide,
               lambda out, x, y: lambda g: (_unbroadcast(g / y, x.shape),
                                            _unbroadcast(-g * out / y, y.shape)))


def neg(a: Tensor) -> Tensor:
    return _op("neg", (a,), np.negative, lambda out, x: lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    return _op("exp", (a,), np.exp, lambda out, x: lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _op("log", (a,), np.log, lambda out, x: lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    return _op("sqrt", (a,), np.sqrt, lambda out, x: lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    return _op("square", (a,), np.square, lambda out, x: lambda g: (g * 2 * x,))


def relu(a: Tensor) -> Tensor:
    return _op("relu", (a,), lambda x: np.maximum(x, 0),
               lambda out, x: lambda g: (g * (x > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""

    def vjp(out, x):
        def f(g):
            x2 = x * x
            t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
            du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du),)
        return f

    return _op("gelu", (a,), _gelu, vjp)


# ----------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(out, x):
        def f(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)
        return f

    return _op("sum", (a,), lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# ------------------------------------------------------------------ structure


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching over leading dims."""
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(out, x, y):
        def f(g):
            ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if need_a else None
            gb = None
            if need_b:
                if y.ndim == 2 and x.ndim > 2:
                    # shared weight: contract over all leading dims at once
                    gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
            return ga, gb
        return f

    return _op("matmul", (a, b), np.matmul, vjp)


def reshape(a: Tensor, shape) -> Tensor:
    return _op("reshape", (a,), lambda x: x.reshape(shape),
               lambda out, x: lambda g: (g.reshape(x.shape),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _op("permute", (a,), lambda x: np.transpose(x, axes),
               lambda out, x: lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    return _op("swap_last", (a,), lambda x: np.swapaxes(x, -1, -2),
               lambda out, x: lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _op("broadcast_to", (a,), lambda x: np.broadcast_to(x, shape),
               lambda out, x: lambda g: (_unbroadcast(g, x.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    def vjp(out, x):
        def f(g):
            full = np.zeros_like(x)
            np.add.at(full, idx, g)
            return (full,)
        return f

    return _op("getitem", (a,), lambda x: x[idx], vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(out, *xs):
        def f(g):
            return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))]
        return f

    return _op("concat", tensors, lambda *xs: np.concatenate(xs, axis=axis), vjp)


# ---------------------------------------------------------------- normalizing


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    def vjp(out, x):
        def f(g):
            return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
        return f

    return _op("softmax", (a,), lambda x: _softmax(x, axis), vjp)


def softmax_cols(a: Tensor) -> Tensor:
    """Softmax down each column (over the second-to-last axis)."""
    return softmax(a, axis=-2)


def softmax_rows(a: Tensor) -> Tensor:
    return softmax(a, axis=-1)


def _layer_norm_core(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    return xc * inv, inv


def layer_norm(x: Tensor, gain, bias) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain = _pair(x, gain)
    bias = as_tensor(bias, like=x)
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs at least 2 features")

    def fwd(xd, gd, bd):
        xhat, _ = _layer_norm_core(xd)
        return xhat * gd + bd

    def vjp(out, xd, gd, bd):
        xhat, inv = _layer_norm_core(xd)

        def f(g):
            gx = g * gd
            d = xd.shape[-1]
            dx = inv / d * (d * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
            return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bd.shape)
        return f

    return _op("layer_norm", (x, gain, bias), fwd, vjp)


# ------------------------------------------------------------------- checking


def finite_difference_check(fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-3,
                            max_coords: int | None = None, seed: int = 0, floor: float = 1e-6) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``fn`` is re-evaluated with each parameter coordinate nudged in place; it
    must be deterministic and return a scalar tensor. With ``max_coords``,
    only that many randomly chosen coordinates of each tensor are probed.
    ``floor`` keeps structurally zero gradients (a bias feeding a
    normalization, say) from turning rounding noise into a large ratio.
    """
    params = list(params)
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn().data)
                flat[i] = orig - h
                fm = float(fn().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(gflat[i] - num) / max(abs(gflat[i]) + abs(num), floor)
                worst = max(worst, float(err))
    return worst
