"""Reverse-mode automatic differentiation over a recorded tape.

Tensors wrap float32 NumPy arrays. While a Tape is active, every primitive
applied to a tensor that requires grad is appended to the tape; a backward
pass walks the tape once in reverse and accumulates gradients into the leaf
tensors. Reductions (sum, mean, matmul, norms, conv) accumulate in float64
and store float32.

Conventions: ReLU subgradient at 0 is 0; max routes its gradient to the
first maximal element on ties; softmax subtracts the row max.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    """Operand shapes do not compose for the named primitive."""


class NonFiniteError(AutodiffError):
    """A primitive produced (or received) NaN/Inf."""


class GradientError(AutodiffError):
    """Backward called on a non-scalar output or an empty tape."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in result")
    return arr


class Tensor:
    """Dense float32 array with an optional gradient buffer.

    `grad` is populated by a backward pass for leaf tensors that require
    grad; it always matches `data` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor: non-finite input data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic goes through the module primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class _Node:
    """One recorded primitive application."""

    __slots__ = ("op", "out", "inputs", "grad_fn")

    def __init__(self, op, out, inputs, grad_fn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of primitive applications, replayed in reverse.

    A tape and its tensors are a single-owner unit; distinct tapes may run
    in parallel threads with no shared state.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, output: Tensor) -> None:
        backward(self, output)


def _record(op: str, out: Tensor, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape._nodes.append(_Node(op, out, tuple(inputs), grad_fn))
    return out


def backward(tape: Tape, output: Tensor) -> None:
    """Populate `.grad` on every requires-grad leaf reachable from `output`.

    Gradients accumulate additively across fan-out and across repeated
    backward calls (call `zero_grad` between uses).
    """
    if tape is None or not tape._nodes:
        raise GradientError("backward: tape is empty (no forward recorded)")
    if output.data.size != 1:
        raise GradientError(f"backward: output must be scalar, got shape {output.shape}")

    produced = {id(node.out) for node in tape._nodes}
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    holders: dict[int, Tensor] = {id(output): output}

    for node in reversed(tape._nodes):
        gout = grads.pop(id(node.out), None)
        if gout is None:
            continue
        gins = node.grad_fn(gout)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float32)
            if g.shape != t.data.shape:
                raise ShapeError(f"{node.op}: gradient shape {g.shape} != input shape {t.data.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = t

    for key, g in grads.items():
        t = holders[key]
        if key in produced or not t.requires_grad:
            continue
        _check_finite(g, "backward")
        t.grad = g if t.grad is None else t.grad + g


def evaluate(graph_fn: Callable, inputs: Sequence[Tensor]) -> Tensor:
    """Run `graph_fn(*inputs)` under a fresh tape and return its output.

    The output tensor carries the tape (`out.tape`) whenever any input
    required grad, so a backward pass can follow.
    """
    tape = Tape()
    with tape:
        out = graph_fn(*inputs)
    if not isinstance(out, Tensor):
        raise AutodiffError("evaluate: graph_fn must return a Tensor")
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (reversing NumPy broadcasting), float64 accumulation."""
    if g.shape == shape:
        return g
    g64 = g.astype(np.float64)
    extra = g64.ndim - len(shape)
    if extra > 0:
        g64 = g64.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g64.shape[i] != 1)
    if axes:
        g64 = g64.sum(axis=axes, keepdims=True)
    return g64.astype(np.float32)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    out = Tensor(_check_finite(a.data + b.data, "add"))
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    out = Tensor(_check_finite(a.data - b.data, "sub"))
    return _record("sub", out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    out = Tensor(_check_finite(a.data * b.data, "mul"))

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return _record("mul", out, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(_check_finite(a.data / b.data, "div"))

    def grad_fn(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _record("div", out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record("neg", out, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not compose")
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
    out = Tensor(_check_finite((a64 @ b64).astype(np.float32), "matmul"))

    def grad_fn(g):
        g64 = g.astype(np.float64)
        return ((g64 @ b64.T).astype(np.float32), (a64.T @ g64).astype(np.float32))

    return _record("matmul", out, (a, b), grad_fn)


def conv1d(x, w) -> Tensor:
    """Valid cross-correlation: x (B, Cin, L) with w (Cout, Cin, K)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-d operands, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1] or x.data.shape[2] < w.data.shape[2]:
        raise ShapeError(f"conv1d: shapes {x.data.shape} and {w.data.shape} do not compose")
    out = Tensor(_check_finite(kernels.conv1d_forward(x.data, w.data), "conv1d"))
    length, kernel = x.data.shape[2], w.data.shape[2]

    def grad_fn(g):
        g = np.ascontiguousarray(g)
        return (kernels.conv1d_grad_input(g, w.data, length), kernels.conv1d_grad_weight(g, x.data, kernel))

    return _record("conv1d", out, (x, w), grad_fn)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0  # subgradient at 0 is 0
    return _record("relu", out, (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        y = _check_finite(np.exp(a.data), "exp")
    out = Tensor(y)
    return _record("exp", out, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = _check_finite(np.log(a.data), "log")
    out = Tensor(y)
    return _record("log", out, (a,), lambda g: (g / a.data,))


def softplus(a) -> Tensor:
    """log(1 + e^x), overflow-safe."""
    a = _as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data.astype(np.float64)).astype(np.float32))

    def grad_fn(g):
        x64 = a.data.astype(np.float64)
        with np.errstate(over="ignore"):
            sig = np.where(x64 >= 0, 1.0 / (1.0 + np.exp(-x64)), np.exp(x64) / (1.0 + np.exp(x64)))
        return ((g.astype(np.float64) * sig).astype(np.float32),)

    return _record("softplus", out, (a,), grad_fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data.astype(np.float64)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y64 = e / e.sum(axis=axis, keepdims=True)
    y = y64.astype(np.float32)
    out = Tensor(y)

    def grad_fn(g):
        g64 = g.astype(np.float64)
        dot = (g64 * y64).sum(axis=axis, keepdims=True)
        return (((g64 - dot) * y64).astype(np.float32),)

    return _record("softmax", out, (a,), grad_fn)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = Tensor(_check_finite(np.asarray(y, dtype=np.float32), "sum"))

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(np.float32),)

    return _record("sum", out, (a,), grad_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    y = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = Tensor(_check_finite(np.asarray(y, dtype=np.float32), "mean"))

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.data.shape) / count).astype(np.float32),)

    return _record("mean", out, (a,), grad_fn)


def max(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    """Max reduction; gradient routes to the first maximal element on ties."""
    a = _as_tensor(a)
    if axis is None:
        y = a.data.max()
        out = Tensor(np.asarray(y, dtype=np.float32))
        flat_idx = int(a.data.argmax())

        def grad_fn(g):
            gx = np.zeros_like(a.data)
            gx.reshape(-1)[flat_idx] = np.asarray(g).reshape(())
            return (gx,)

        return _record("max", out, (a,), grad_fn)

    y = a.data.max(axis=axis, keepdims=keepdims)
    out = Tensor(np.asarray(y, dtype=np.float32))
    idx = a.data.argmax(axis=axis)  # first occurrence wins

    def grad_fn(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis=axis)
        return (gx,)

    return _record("max", out, (a,), grad_fn)


def l2norm(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    sq = (a.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=keepdims)
    y64 = np.sqrt(sq)
    out = Tensor(np.asarray(y64, dtype=np.float32))

    def grad_fn(g):
        g = np.asarray(g)
        denom = np.asarray(y64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            denom = np.expand_dims(denom, axis)
        safe = np.maximum(denom, 1e-12)
        return ((np.broadcast_to(g, a.data.shape) * a.data / safe).astype(np.float32),)

    return _record("l2norm", out, (a,), grad_fn)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along `axis`; composed from primitives."""
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("cosine_similarity", a, b)
    dot = sum(mul(a, b), axis=axis)
    na = clamp(l2norm(a, axis=axis), 1e-12, None)
    nb = clamp(l2norm(b, axis=axis), 1e-12, None)
    return div(dot, mul(na, nb))


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 wherever lo <= x <= hi, else 0."""
    a = _as_tensor(a)
    y = np.clip(a.data, lo, hi)
    out = Tensor(y)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _record("clamp", out, (a,), lambda g: (g * mask,))


def gather_rows(a, indices) -> Tensor:
    """Pick a[i, indices[i]] from a 2-d tensor -> 1-d tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-d tensor, got {a.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError(f"gather_rows: index shape {idx.shape} != batch {a.data.shape[0]}")
    if (idx < 0).any() or (idx >= a.data.shape[1]).any():
        raise ShapeError(f"gather_rows: index out of range [0, {a.data.shape[1]})")
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx])

    def grad_fn(g):
        gx = np.zeros_like(a.data)
        gx[rows, idx] = g
        return (gx,)

    return _record("gather_rows", out, (a,), grad_fn)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got {a.data.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T))
    return _record("transpose", out, (a,), lambda g: (np.ascontiguousarray(g.T),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}") from None
    out = Tensor(y)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.data.shape),))


def maxpool1d(a, width: int) -> Tensor:
    """Non-overlapping max pooling over the last axis of a (B, C, L) tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError(f"maxpool1d: expected 3-d tensor, got {a.data.shape}")
    b, c, length = a.data.shape
    if width < 1 or length % width != 0:
        raise ShapeError(f"maxpool1d: length {length} not divisible by width {width}")
    blocks = a.data.reshape(b, c, length // width, width)
    out = Tensor(blocks.max(axis=3))
    idx = blocks.argmax(axis=3)  # first occurrence wins

    def grad_fn(g):
        gx = np.zeros_like(blocks)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=3)
        return (gx.reshape(b, c, length),)

    return _record("maxpool1d", out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(fn: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-3) -> float:
    """Max relative error between analytic gradient and central differences.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|); the fn
    must be scalar-valued in one tensor argument.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    leaf = Tensor(point.data.copy(), requires_grad=True)
    tape = Tape()
    with tape:
        out = fn(leaf)
    if out.data.size != 1:
        raise GradientError("finite_diff_check: fn must be scalar-valued")
    backward(tape, out)
    analytic = leaf.grad.astype(np.float64).reshape(-1)

    base = point.data.astype(np.float64).reshape(-1)
    numeric = np.empty_like(base)
    for i in range(base.size):
        # realize the step in float32 and divide by the step actually taken
        plus = np.float32(base[i] + h)
        minus = np.float32(base[i] - h)
        bumped = base.copy()
        bumped[i] = plus
        f_plus = fn(Tensor(bumped.reshape(point.data.shape))).item()
        bumped[i] = minus
        f_minus = fn(Tensor(bumped.reshape(point.data.shape))).item()
        numeric[i] = (f_plus - f_minus) / (float(plus) - float(minus))
    if not np.isfinite(numeric).all():
        raise NonFiniteError("finite_diff_check: non-finite central difference")

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
