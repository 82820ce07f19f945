"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Only the operations the synchronisation network needs are provided.  Every
operation run inside ``with Tape() as tape:`` is recorded; ``tape.backward``
then replays the records in reverse.  Outside a tape operations only compute
values, which keeps inference cheap.  Tapes are thread-local.
"""
from __future__ import annotations

import threading

import numpy as np

_local = threading.local()


def _active():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    def __init__(self):
        self.records = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def backward(self, out: Var, seed=None):
        """Accumulate d(out)/d(leaf) into every leaf's ``grad``."""
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=float)
        for node, fn in reversed(self.records):
            if node.grad is not None:
                fn(node.grad)


class Var:
    """A value in the computation graph.  Leaves with ``requires_grad`` collect gradients."""

    __slots__ = ("value", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _needs(*xs) -> bool:
    return any(x.requires_grad for x in xs)


def _accum(x: Var, g):
    if not x.requires_grad:
        return
    x.grad = g if x.grad is None else x.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _record(out: Var, inputs, fn):
    tape = _active()
    if tape is not None and _needs(*inputs):
        out.requires_grad = True
        tape.records.append((out, fn))
    return out


def add(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.value + b.value)

    def fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _record(out, (a, b), fn)


def sub(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.value - b.value)

    def fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _record(out, (a, b), fn)


def mul(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.value * b.value)

    def fn(g):
        _accum(a, _unbroadcast(g * b.value, a.shape))
        _accum(b, _unbroadcast(g * a.value, b.shape))
    return _record(out, (a, b), fn)


def matmul(a, b):
    """``a @ b`` with numpy broadcasting over leading batch dimensions."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if bv.ndim == 2 and av.ndim > 2:
        out = Var((av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + (bv.shape[1],)))
    else:
        out = Var(av @ bv)

    def fn(g):
        if a.requires_grad:
            if av.ndim == 2 and bv.ndim > 2:
                # shared left operand: fold the batch into columns
                gf = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
                bf = np.moveaxis(bv, -2, 0).reshape(bv.shape[-2], -1)
                _accum(a, gf @ bf.T)
            else:
                _accum(a, _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape))
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                _accum(b, av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape))
    return _record(out, (a, b), fn)


def propagate(stack: np.ndarray, x):
    """Apply ``K`` constant ``(N, N)`` operators to node features ``(..., N, d)``.

    Returns ``(..., N, K*d)`` with the ``k``-th block equal to ``stack[k] @ x``.
    One matmul covers every partition and batch element.
    """
    x = as_var(x)
    K, N, _ = stack.shape
    xv = x.value
    lead = xv.shape[:-2]
    d = xv.shape[-1]
    xf = np.moveaxis(xv, -2, 0).reshape(N, -1)  # (N, lead*d)
    yf = stack.reshape(K * N, N) @ xf  # (K*N, lead*d)
    y = np.moveaxis(yf.reshape((K, N) + lead + (d,)), 0, -2)  # (N, lead, K, d)
    y = np.moveaxis(y, 0, -3).reshape(lead + (N, K * d))
    out = Var(y)

    def fn(g):
        gk = g.reshape(lead + (N, K, d))
        gk = np.moveaxis(np.moveaxis(gk, -2, 0), -2, 1).reshape(K * N, -1)  # (K*N, lead*d)
        gx = stack.reshape(K * N, N).T @ gk
        _accum(x, np.moveaxis(gx.reshape((N,) + lead + (d,)), 0, -2))
    return _record(out, (x,), fn)


def sigmoid(x):
    x = as_var(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    out = Var(s)

    def fn(g):
        _accum(x, g * s * (1.0 - s))
    return _record(out, (x,), fn)


def tanh(x):
    x = as_var(x)
    t = np.tanh(x.value)
    out = Var(t)

    def fn(g):
        _accum(x, g * (1.0 - t * t))
    return _record(out, (x,), fn)


def relu(x):
    x = as_var(x)
    mask = x.value > 0
    out = Var(np.where(mask, x.value, 0.0))

    def fn(g):
        _accum(x, g * mask)
    return _record(out, (x,), fn)


def square(x):
    x = as_var(x)
    out = Var(x.value * x.value)

    def fn(g):
        _accum(x, 2.0 * g * x.value)
    return _record(out, (x,), fn)


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001
    x = as_var(x)
    out = Var(x.value.sum(axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape).copy())
    return _record(out, (x,), fn)


def mean(x, axis=None, keepdims: bool = False):
    x = as_var(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / n)


def concat(xs, axis: int = -1):
    xs = [as_var(x) for x in xs]
    out = Var(np.concatenate([x.value for x in xs], axis=axis))
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def fn(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            _accum(x, part)
    return _record(out, xs, fn)


def split(x, n: int, axis: int = -1):
    """Split into ``n`` equal parts along ``axis``."""
    x = as_var(x)
    outs = [Var(p) for p in np.split(x.value, n, axis=axis)]
    tape = _active()
    if tape is None or not x.requires_grad:
        return outs
    state = {"done": False}

    def fn(_g):
        # every part's consumers were recorded later, so all part gradients are final here
        if state["done"]:
            return
        state["done"] = True
        _accum(x, np.concatenate(
            [o.grad if o.grad is not None else np.zeros_like(o.value) for o in outs], axis=axis))
    for o in outs:
        o.requires_grad = True
        tape.records.append((o, fn))
    return outs


def _basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is Ellipsis or i is None or isinstance(i, (slice, int, np.integer)) for i in items)


def getitem(x, idx):
    x = as_var(x)
    out = Var(x.value[idx])

    def fn(g):
        full = np.zeros_like(x.value)
        if _basic_index(idx):
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(x, full)
    return _record(out, (x,), fn)


def reshape(x, shape):
    x = as_var(x)
    out = Var(x.value.reshape(shape))

    def fn(g):
        _accum(x, g.reshape(x.shape))
    return _record(out, (x,), fn)


def expand_last(x):
    """Append a trailing unit axis."""
    return reshape(x, as_var(x).shape + (1,))


def log_softmax(x, axis: int = -1):
    x = as_var(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    ls = z - lse
    out = Var(ls)
    sm = np.exp(ls)

    def fn(g):
        _accum(x, g - sm * g.sum(axis=axis, keepdims=True))
    return _record(out, (x,), fn)


def softmax_np(x, axis: int = -1) -> np.ndarray:
    z = np.asarray(x, float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
