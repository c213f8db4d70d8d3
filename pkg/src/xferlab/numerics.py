"""Dense float64 tensors with a tape-based reverse mode.

Operations executed inside an active :class:`Tape` are recorded in execution
order; :meth:`Tape.backward` replays the adjoints in reverse.  Outside a tape
the same operations run as plain numpy code, which is what the inference and
Shapley paths use.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Entry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications.

    Entries are appended as operations execute, so every input of entry ``i``
    is a leaf or the output of an earlier entry.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def backward(self, output: Tensor) -> None:
        if output.data.size != 1:
            raise ContractError(f"backward needs a scalar seed, got shape {output.shape}")
        adj: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for entry in reversed(self.entries):
            g = adj.pop(id(entry.output), None)
            if g is None:
                continue
            grads = entry.backward_fn(g)
            for inp, gi in zip(entry.inputs, grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp._node is None:
                    # leaf: accumulate into its buffer
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=np.float64).reshape(inp.shape)
                    else:
                        inp.grad = inp.grad + gi.reshape(inp.shape)
                else:
                    k = id(inp)
                    adj[k] = adj[k] + gi if k in adj else gi
        if output._node is None and output.requires_grad:
            output.grad = np.ones_like(output.data) if output.grad is None else output.grad + 1.0


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_state = _State()


def active_tape() -> Tape | None:
    return _state.stack[-1] if _state.stack else None


def backward(tape: Tape, output: Tensor) -> None:
    tape.backward(output)


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite value produced by {op}")


def _emit(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    if needs:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out._node = None
    if needs:
        entry = _Entry(inputs, out, backward_fn)
        out._node = entry
        tape.entries.append(entry)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def total(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size
    return _emit("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, shape),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    ax = axis % len(shape)
    return _emit("sum_axis", a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape),))


# shape manipulation --------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _emit("broadcast_to", np.broadcast_to(a.data, shape), (a,),
                 lambda g: (_unbroadcast(g, old),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", data, tuple(parts), bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    ax = axis % len(shape)
    idx = [slice(None)] * len(shape)
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _emit("slice", a.data[idx], (a,), bw)


def take_columns(a: Tensor, cols) -> Tensor:
    """Pick ``a[b, :, cols[b]]`` for a (B, M, C) tensor, giving (B, M)."""
    a = _as_tensor(a)
    cols = np.asarray(cols, dtype=np.int64)
    shape = a.shape
    if a.data.ndim != 3 or cols.shape != (shape[0],):
        raise DimensionError(f"take_columns: tensor {shape} with columns {cols.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= shape[2]):
        raise IndexError(f"column index out of range for {shape[2]} columns")
    rows = np.arange(shape[0])
    out = a.data[rows, :, cols]

    def bw(g):
        full = np.zeros(shape)
        full[rows, :, cols] = g
        return (full,)

    return _emit("take_columns", out, (a,), bw)


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # weight matrix: one large GEMM instead of many small batched ones
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _emit("matmul", out, (a, b), bw2)

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", ad @ bd, (a, b), bw)


# nonlinearities ------------------------------------------------------------

def gelu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    t = np.multiply(x, x, out=np.empty_like(x))
    t *= _GELU_C
    t += 1.0
    t *= x
    t *= _SQRT_2_OVER_PI
    np.tanh(t, out=t)
    out = np.add(t, 1.0, out=np.empty_like(t))
    out *= x
    out *= 0.5

    def bw(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _emit("gelu", out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", s, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with the biased (1/n) variance."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    x = a.data
    n = x.shape[-1]
    if n < 2:
        raise DimensionError(f"layer_norm needs at least 2 features, got {n}")
    xhat = x - x.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None]
    var /= n
    var += eps
    inv = 1.0 / np.sqrt(var)
    xhat *= inv
    gd = gain.data
    out = xhat * gd
    out += bias.data

    def bw(g):
        gx = g * gd
        gxa = inv * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (gxa, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape))

    return _emit("layer_norm", out, (a, gain, bias), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = x - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", out, (a,), bw)


def cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the leading axis.

    A 1-D ``logits`` with an integer label is treated as a batch of one.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim == 1:
        logits = reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"cross_entropy: {B} rows but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"label out of range for {C} classes: {labels.tolist()}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = x - m - np.log(z)
    rows = np.arange(B)
    val = -logp[rows, labels].mean()

    def bw(g):
        p = e / z
        p[rows, labels] -= 1.0
        return (g * p / B,)

    return _emit("cross_entropy", np.asarray(val), (logits,), bw)


# verification --------------------------------------------------------------

def finite_difference_gradient(f: Callable[[np.ndarray], float], theta: np.ndarray,
                               indices, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(θ+h e_i) - f(θ-h e_i)) / 2h`` at each index."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.array(theta, dtype=np.float64)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= theta.size):
        raise IndexError("finite-difference index out of range")
    out = np.empty(idx.size)
    for j, i in enumerate(idx):
        keep = theta[i]
        theta[i] = keep + h
        fp = f(theta)
        theta[i] = keep - h
        fm = f(theta)
        theta[i] = keep
        out[j] = (fp - fm) / (2.0 * h)
    return out
