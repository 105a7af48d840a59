"""Dense float64 tensors with reverse-mode autodiff on a per-step tape.

The tape is define-by-run: every primitive appends a node while recording
is active, and the trainer starts a fresh tape each step. All arithmetic
is 64-bit so finite-difference gradient checks are meaningful.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12  # clamp for log arguments; avoids -inf on zero probabilities


class Tensor:
    """Dense 64-bit array plus an optional gradient slot.

    Leaf tensors created with requires_grad=True get a zero-initialized
    grad; op outputs never hold their own grad (backward() only populates
    leaves).
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_scalar(self)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small operator sugar; everything routes through the primitives below
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _fail_scalar(t: Tensor):
    raise ValueError(f"item(): tensor of shape {t.data.shape} is not a scalar")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Node:
    """One applied primitive: output, inputs, and the vjp closure."""

    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of applied primitives; execution order is topological."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []


_tape: Tape | None = Tape()


def new_tape() -> Tape:
    """Discard the current tape and start recording on a fresh one."""
    global _tape
    _tape = Tape()
    return _tape


def current_tape() -> Tape | None:
    return _tape


@contextmanager
def no_grad():
    """Temporarily disable recording (eval forward, numeric probes)."""
    global _tape
    saved, _tape = _tape, None
    try:
        yield
    finally:
        _tape = saved


@contextmanager
def scoped_tape():
    """Record on a private tape, restoring the caller's tape afterwards."""
    global _tape
    saved, _tape = _tape, Tape()
    try:
        yield _tape
    finally:
        _tape = saved


def _make(out_data, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    if _tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        _tape.nodes.append(Node(out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _shapes(*tensors) -> str:
    return ", ".join(str(t.data.shape) for t in tensors)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: incompatible shapes {_shapes(a, b)}") from None
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ValueError(f"sub: incompatible shapes {_shapes(a, b)}") from None
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: incompatible shapes {_shapes(a, b)}") from None
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {_shapes(a, b)}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree {_shapes(a, b)}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {_shapes(a, b)}") from None

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {orig} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(orig),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(_wrap(p) for p in parts)
    if not parts:
        raise ValueError("concat: need at least one tensor")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {_shapes(*parts)} on axis {axis}") from None
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, parts, vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` (V, d) by an integer id array."""
    ids = np.asarray(ids)
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"embedding: id out of range [0, {vocab}), got "
                         f"min={ids.min()} max={ids.max()}")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), vjp)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis; idx shape = a.shape[:-1]."""
    idx = np.asarray(idx)
    if idx.shape != a.data.shape[:-1]:
        raise ValueError(f"gather_last: index shape {idx.shape} does not match "
                         f"leading shape of {a.data.shape}")
    last = a.data.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= last):
        raise ValueError(f"gather_last: index out of range [0, {last})")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        ga = np.zeros_like(a.data)
        flat = ga.reshape(-1, last)
        flat[np.arange(flat.shape[0]), idx.reshape(-1)] = g.reshape(-1)
        return (ga,)

    return _make(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({d},), got {_shapes(gain, bias)}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def vjp(g):
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), vjp)


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    """Natural log with the argument clamped at LOG_FLOOR."""
    safe = np.maximum(a.data, LOG_FLOOR)
    live = a.data >= LOG_FLOOR
    return _make(np.log(safe), (a,), lambda g: (g * live / safe,))


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy() / n,)

    return _make(out, (a,), vjp)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, value, a.data)
    except ValueError:
        raise ValueError(f"masked_fill: mask shape {mask.shape} incompatible with {a.data.shape}") from None
    if out.shape != a.data.shape:
        raise ValueError(f"masked_fill: mask shape {mask.shape} broadcasts beyond {a.data.shape}")
    return _make(out, (a,), lambda g: (_unbroadcast(g * ~mask, a.data.shape),))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None,
            training: bool = True) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors."""
    if rate >= 1.0:
        raise ValueError(f"dropout: rate must be < 1, got {rate}")
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; backward treats the value as a constant."""
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _walk(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.out))
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.vjp(g_out)):
            if g is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = g if acc is None else acc + g
    return grads


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into every requires_grad leaf on the tape."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad or _tape is None:
        return
    grads = _walk(loss, _tape)
    leaves = {id(loss): loss} if loss.is_leaf else {}
    for node in _tape.nodes:
        for t in node.inputs:
            if t.is_leaf and t.requires_grad:
                leaves[id(t)] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is not None:
            t.grad = t.grad + g if t.grad is not None else g.copy()


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. given tensors, without touching .grad."""
    if loss.data.size != 1:
        raise ValueError(f"grad: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad or _tape is None:
        return [np.zeros_like(t.data) for t in wrt]
    grads = _walk(loss, _tape)
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be deterministic (freeze any dropout masks by reseeding inside f).
    """
    if not x.requires_grad:
        raise ValueError("finite_difference_check: x must require grad")
    with scoped_tape() as tape:
        loss = f(x)
        if loss.data.size != 1:
            raise ValueError("finite_difference_check: f must return a scalar")
        analytic = _walk(loss, tape).get(id(x), np.zeros_like(x.data))

    worst = 0.0
    flat = x.data.reshape(-1)
    a_flat = analytic.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(x).data.reshape(-1)[0])
            flat[i] = orig - step
            fm = float(f(x).data.reshape(-1)[0])
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            err = abs(a_flat[i] - numeric) / (abs(a_flat[i]) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
