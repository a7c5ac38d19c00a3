"""Minimal define-by-run reverse-mode autodiff over numpy arrays, plus Adam.

Every op records a closure that maps the output adjoint to input adjoints.
Graphs are rebuilt each iteration; ``backward`` walks them in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12

_default_dtype = np.float64
_grad_enabled = True
_check_finite = True


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a value or gradient."""


class ShapeError(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording backward closures."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _check_finite
    old = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = old


class Tensor:
    """Dense real array that can participate in a differentiation graph."""

    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value)
        if arr.dtype.kind in "biuf" and arr.dtype != _default_dtype:
            arr = arr.astype(_default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.value = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar; every call routes through apply()
    def __add__(self, other):
        return apply("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return apply("subtract", self, other)

    def __rsub__(self, other):
        return apply("subtract", other, self)

    def __mul__(self, other):
        return apply("multiply", self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return apply("multiply", self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return apply("multiply", self, 1.0 / other)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# Each op: forward(*arrays, **attrs) -> (out, backward) where
# backward(g) returns one adjoint (or None) per input.

# Binary ops receive ``needs`` (which inputs want an adjoint) so they can
# skip work for constants.

def _op_add(a, b, needs=(True, True)):
    _broadcast_shape(a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape) if needs[0] else None,
                             _unbroadcast(g, b.shape) if needs[1] else None)


def _op_subtract(a, b, needs=(True, True)):
    _broadcast_shape(a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape) if needs[0] else None,
                             _unbroadcast(-g, b.shape) if needs[1] else None)


def _op_multiply(a, b, needs=(True, True)):
    _broadcast_shape(a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape) if needs[0] else None,
                             _unbroadcast(g * a, b.shape) if needs[1] else None)


def _op_matmul(a, b, needs=(True, True)):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    out = a @ b

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape) if needs[0] else None
        gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape) if needs[1] else None
        return ga, gb

    return out, back


def _op_square(a):
    return a * a, lambda g: (2.0 * a * g,)


def _op_sin(a):
    return np.sin(a), lambda g: (np.cos(a) * g,)


def _op_sine(a, w0=1.0):
    """sin(w0 * a) as one node."""
    z = a * w0
    return np.sin(z), lambda g: (np.cos(z) * (g * w0),)


def _op_softplus(a):
    out = np.logaddexp(0.0, a)

    def back(g):
        sig = np.exp(a - out)  # logistic(a), stable
        return (g * sig,)

    return out, back


def _op_exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _op_log(a):
    safe = np.maximum(a, LOG_FLOOR)
    return np.log(safe), lambda g: (np.where(a > LOG_FLOOR, g / safe, 0.0),)


def _op_abs(a):
    # subgradient at 0 is 0 (np.sign(0) == 0)
    return np.abs(a), lambda g: (g * np.sign(a),)


def _op_concat(*arrays, axis=-1):
    if len(arrays) == 0:
        raise ShapeError("concat of nothing")
    lead = {arr.shape[:-1] for arr in arrays} if axis == -1 else None
    if lead is not None and len(lead) != 1:
        raise ShapeError(f"concat leading shapes differ: {[a.shape for a in arrays]}")
    out = np.concatenate(arrays, axis=axis)
    splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=axis))


def _op_softmax(a, axis=-1):
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return out, back


def _op_sum(a, axis=None, keepdims=False):
    out = np.sum(a, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * a.ndim)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, back


def _op_mean(a, axis=None, keepdims=False):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    count = a.size // max(np.size(out), 1) if axis is not None else a.size

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * a.ndim)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return out, back


def _op_reshape(a, shape=()):
    try:
        out = a.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return out, lambda g: (g.reshape(a.shape),)


OPS: dict[str, Callable] = {
    "matmul": _op_matmul,
    "add": _op_add,
    "multiply": _op_multiply,
    "subtract": _op_subtract,
    "square": _op_square,
    "sin": _op_sin,
    "sine": _op_sine,
    "softplus": _op_softplus,
    "exp": _op_exp,
    "log": _op_log,
    "abs": _op_abs,
    "concat": _op_concat,
    "softmax": _op_softmax,
    "mean": _op_mean,
    "sum": _op_sum,
    "reshape": _op_reshape,
}


_NEEDS_AWARE = frozenset({"add", "subtract", "multiply", "matmul"})


def apply(kind: str, *inputs, **attrs) -> Tensor:
    """Run op ``kind`` forward and record it for backward when needed."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    if kind in _NEEDS_AWARE:
        attrs["needs"] = tuple(t.requires_grad for t in tensors)
    out_val, back = fn(*(t.value for t in tensors), **attrs)
    out_val = np.asarray(out_val)
    if out_val.ndim == 0:
        out_val = out_val.reshape(1)
    if _check_finite and not np.isfinite(out_val).all():
        raise NonFiniteError(f"non-finite value produced by {kind}")
    out = Tensor.__new__(Tensor)
    out.value = out_val
    out.grad = None
    out.name = None
    out.op = kind
    needs = _grad_enabled and any(t.requires_grad for t in tensors)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(tensors)
        out._backward = back
    else:
        out._parents = ()
        out._backward = None
    return out


# convenience wrappers
def matmul(a, b):
    return apply("matmul", a, b)


def sin(a):
    return apply("sin", a)


def sine(a, w0: float = 1.0):
    return apply("sine", a, w0=w0)


def softplus(a):
    return apply("softplus", a)


def exp(a):
    return apply("exp", a)


def log(a):
    return apply("log", a)


def absolute(a):
    return apply("abs", a)


def square(a):
    return apply("square", a)


def concat(tensors: Sequence, axis: int = -1):
    return apply("concat", *tensors, axis=axis)


def softmax(a, axis: int = -1):
    return apply("softmax", a, axis=axis)


def stack_last(tensors: Sequence[Tensor]) -> Tensor:
    """Stack ``k`` tensors of shape (B, D) into (B, k, D)."""
    b, d = tensors[0].shape
    return concat(tensors, axis=-1).reshape(b, len(tensors), d)


def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(node) through the graph.

    Returns a map from each leaf tensor requiring grad to its gradient. Any
    tensor in ``params`` not reachable from ``loss`` maps to zeros. Leaf
    ``.grad`` attributes are overwritten.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.value).all():
        raise NonFiniteError("loss is not finite")
    grads: dict[int, np.ndarray] = {}
    out: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value)
        for node in reversed(topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                out[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    if params is not None:
        for p in params:
            if p not in out:
                p.grad = np.zeros_like(p.value)
                out[p] = p.grad
    for g in out.values():
        if _check_finite and not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient")
    return out


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst per-parameter relative error between backward and central differences.

    For each parameter tensor the error is max|analytic - numeric| divided by
    (max|numeric| + 1e-12); for scalars this is the usual elementwise ratio.
    ``f`` must rebuild its graph from the current parameter values on each call.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    loss = f()
    grads = backward(loss, params)
    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.value.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteError("f returned a non-finite value")
                numeric[i] = (up - down) / (2 * step)
            analytic = grads[p].reshape(-1)
            err = np.max(np.abs(analytic - numeric)) / (np.max(np.abs(numeric)) + 1e-12)
            worst = max(worst, float(err))
    return worst


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3
    decay: float = 1.0
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.lr * self.decay ** self.step


def adam_step(params: Sequence[Tensor], grads: dict[Tensor, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    Moments are keyed by ``id(param)`` so a state must stay with its params.
    """
    lr = state.current_lr()
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.value.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient passed to adam_step")
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.value)
            state.v[key] = np.zeros_like(p.value)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return state


class Adam:
    """Adam with a per-step multiplicative learning-rate decay."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, decay: float = 1.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr < 0 or not 0 < decay <= 1:
            raise ValueError("need lr >= 0 and decay in (0, 1]")
        self.params = list(params)
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps, lr=lr, decay=decay)

    @property
    def lr(self) -> float:
        return self.state.current_lr()

    def step(self, grads: dict[Tensor, np.ndarray], only: Sequence[Tensor] | None = None) -> None:
        """Update all params, or just ``only`` (the rest keep their bytes)."""
        adam_step(self.params if only is None else only, grads, self.state)
