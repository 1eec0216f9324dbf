"""Reverse-mode differentiation over numpy arrays.

Operations on :class:`Tensor` objects are recorded on the active
:class:`Tape` whenever at least one input requires a gradient. The
module-level functions (``tanh``, ``sin``, ``maximum`` ...) dispatch on
their argument: plain floats and arrays go straight to numpy, tensors are
recorded. Model code written against these functions therefore runs
unchanged in the fast no-gradient path (rollouts, planning) and in the
taped training path.
"""
from __future__ import annotations

import numpy as np

_TAPES: list["Tape"] = []


class Tensor:
    """An array value that may participate in a recorded computation."""

    __slots__ = ("value", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf tensor. Its value is replaced in place by optimizers."""

    __slots__ = ()

    def __init__(self, value, name=None):
        super().__init__(value, requires_grad=True, name=name)


class Tape:
    """Records one forward pass and computes gradients by a reverse sweep.

    Use as a context manager; operations executed inside the block are
    recorded. ``backward`` may be called once per tape.
    """

    def __init__(self):
        self._records = []
        self._grads = None

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, inputs, vjp):
        self._records.append((out, inputs, vjp))

    def backward(self, loss):
        if self._grads is not None:
            raise RuntimeError("backward() already called on this tape")
        if not isinstance(loss, Tensor) or loss.value.size != 1:
            raise ValueError("loss must be a scalar Tensor")
        grads = {id(loss): np.ones_like(loss.value)}
        owned = set()  # keys whose gradient array may be updated in place
        for out, inputs, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                cur = grads.get(key)
                if isinstance(gi, _IndexedGrad):
                    if cur is None:
                        cur = np.zeros(gi.shape)
                    elif key not in owned:
                        cur = cur.copy()
                    gi.add_into(cur)
                    grads[key] = cur
                    owned.add(key)
                elif cur is None:
                    grads[key] = gi
                else:
                    grads[key] = cur + gi
                    owned.add(key)
        self._grads = grads
        # drop the graph; only leaf gradients are kept
        self._records = []
        return self

    def gradient(self, tensor):
        """Gradient of the loss w.r.t. ``tensor`` (zeros if it was not used)."""
        if self._grads is None:
            raise RuntimeError("backward() has not been called")
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.value)
        return np.reshape(g, tensor.value.shape)


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value, inputs, vjp):
    """Build the output tensor and record it if any input needs a gradient."""
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, tuple(_wrap(t) for t in inputs), vjp)
        else:
            out.requires_grad = False
    return out


def custom_op(value, inputs, vjp):
    """Record a hand-differentiated op: ``vjp(g)`` returns one gradient per input."""
    return _make(value, inputs, vjp)


def is_tensor(x):
    return isinstance(x, Tensor)


def value_of(x):
    """Underlying numpy value of a tensor, or the input unchanged."""
    return x.value if isinstance(x, Tensor) else x


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# --- binary arithmetic -------------------------------------------------------

def add(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return a + b
    av, bv = _val(a), _val(b)
    return _make(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return a - b
    av, bv = _val(a), _val(b)
    return _make(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return a * b
    av, bv = _val(a), _val(b)
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return a / b
    av, bv = _val(a), _val(b)
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    if not isinstance(a, Tensor):
        return -a
    return _make(-a.value, (a,), lambda g: (-g,))


def power(a, exponent):
    """``a ** exponent`` for a constant exponent."""
    if not isinstance(a, Tensor):
        return a ** exponent
    av = a.value
    return _make(av ** exponent, (a,), lambda g: (g * exponent * av ** (exponent - 1),))


def maximum(a, b):
    """Elementwise maximum; ties route the gradient to ``a``."""
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.maximum(a, b)
    av, bv = _val(a), _val(b)
    pick_a = av >= bv
    return _make(np.where(pick_a, av, bv), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), av.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), bv.shape)))


def minimum(a, b):
    """Elementwise minimum; ties route the gradient to ``a``."""
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.minimum(a, b)
    av, bv = _val(a), _val(b)
    pick_a = av <= bv
    return _make(np.where(pick_a, av, bv), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), av.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), bv.shape)))


def clip(a, lo, hi):
    if not isinstance(a, Tensor):
        return np.clip(a, lo, hi)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


# --- unary elementwise -------------------------------------------------------

def tanh(a):
    if not isinstance(a, Tensor):
        return np.tanh(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    if not isinstance(a, Tensor):
        return _sigmoid(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def sin(a):
    if not isinstance(a, Tensor):
        return np.sin(a)
    av = a.value
    return _make(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    if not isinstance(a, Tensor):
        return np.cos(a)
    av = a.value
    return _make(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def arctan(a):
    if not isinstance(a, Tensor):
        return np.arctan(a)
    av = a.value
    return _make(np.arctan(av), (a,), lambda g: (g / (1.0 + av * av),))


def exp(a):
    if not isinstance(a, Tensor):
        return np.exp(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    if not isinstance(a, Tensor):
        return np.log(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    if not isinstance(a, Tensor):
        return np.sqrt(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def square(a):
    if not isinstance(a, Tensor):
        return np.square(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def wrap_angle(a):
    """Wrap to (-pi, pi]. The shift is piecewise constant, so d/da = 1."""
    av = _val(a)
    # in-range values pass through untouched so a zero step is exact
    inside = (av > -np.pi) & (av <= np.pi)
    wrapped = np.where(inside, av, np.pi - np.mod(np.pi - av, 2.0 * np.pi))
    if not isinstance(a, Tensor):
        return wrapped if np.ndim(wrapped) else float(wrapped)
    return _make(wrapped, (a,), lambda g: (g,))


def stop_gradient(a):
    return Tensor(a.value) if isinstance(a, Tensor) else a


# --- reductions and shape ----------------------------------------------------

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    if not isinstance(a, Tensor):
        return np.sum(a, axis=axis)
    av = a.value

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)
    return _make(np.sum(av, axis=axis), (a,), vjp)


def mean(a, axis=None):
    n = _val(a).size if axis is None else _val(a).shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    if not isinstance(a, Tensor):
        return np.reshape(a, shape)
    old = a.value.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if not isinstance(a, Tensor):
        return np.transpose(a, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


class _IndexedGrad:
    """Gradient that is nonzero only at ``index``; accumulated in place by the tape."""

    __slots__ = ("index", "value", "shape")

    def __init__(self, index, value, shape):
        self.index, self.value, self.shape = index, value, shape

    def add_into(self, full):
        if _fancy(self.index):
            np.add.at(full, self.index, self.value)
        else:
            full[self.index] += self.value


def getitem(a, index):
    av = a.value

    def vjp(g):
        return (_IndexedGrad(index, g, av.shape),)
    return _make(av[index], (a,), vjp)


def _fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(items, axis=-1):
    if not any(isinstance(t, Tensor) for t in items):
        return np.concatenate([np.asarray(t) for t in items], axis=axis)
    vals = [_val(t) for t in items]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _make(np.concatenate(vals, axis=axis), tuple(items), vjp)


def stack(items, axis=0):
    if not any(isinstance(t, Tensor) for t in items):
        return np.stack([np.asarray(t, dtype=np.float64) for t in items], axis=axis)
    vals = [_val(t) for t in items]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))
    return _make(out, tuple(items), vjp)


def matmul(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.matmul(a, b)
    av, bv = _val(a), _val(b)

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
        if av.ndim == 1:
            gb = np.multiply.outer(av, g)
        else:
            gb = np.swapaxes(av, -1, -2) @ g
            while gb.ndim > bv.ndim:
                gb = gb.sum(axis=0)
        return (_unbroadcast(ga, av.shape), gb)
    return _make(av @ bv, (a, b), vjp)


# --- fused network ops -------------------------------------------------------

def dense(x, weight, bias, activation="identity"):
    """``activation(x @ W.T + b)`` for a batch of row vectors."""
    xv, wv, bv = _val(x), _val(weight), _val(bias)
    pre = xv @ wv.T + bv
    out = np.tanh(pre) if activation == "tanh" else pre
    if not any(isinstance(t, Tensor) and t.requires_grad for t in (x, weight, bias)):
        return Tensor(out) if any(isinstance(t, Tensor) for t in (x, weight, bias)) else out

    def vjp(g):
        if activation == "tanh":
            g = g * (1.0 - out * out)
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, xv.shape[-1])
        return (g @ wv, g2.T @ x2, g2.sum(axis=0))
    return _make(out, (x, weight, bias), vjp)


def lstm_step(x, h, c, w_input, w_hidden, bias):
    """One LSTM recurrence on a batch.

    Gate order in the stacked weights is (input, forget, candidate, output).
    Returns the concatenation ``[h', c']`` along the last axis.
    """
    xv, hv, cv = _val(x), _val(h), _val(c)
    wi, wh, bv = _val(w_input), _val(w_hidden), _val(bias)
    size = hv.shape[-1]
    z = xv @ wi.T + hv @ wh.T + bv
    i = _sigmoid(z[..., :size])
    f = _sigmoid(z[..., size:2 * size])
    gcand = np.tanh(z[..., 2 * size:3 * size])
    o = _sigmoid(z[..., 3 * size:])
    c_new = f * cv + i * gcand
    tc = np.tanh(c_new)
    h_new = o * tc
    out = np.concatenate([h_new, c_new], axis=-1)
    inputs = (x, h, c, w_input, w_hidden, bias)
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return Tensor(out) if any(isinstance(t, Tensor) for t in inputs) else out

    def vjp(g):
        gh = g[..., :size]
        gc = g[..., size:] + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gc * gcand * i * (1.0 - i),
            gc * cv * f * (1.0 - f),
            gc * i * (1.0 - gcand * gcand),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        dz2 = dz.reshape(-1, dz.shape[-1])
        return (dz @ wi, dz @ wh, gc * f,
                dz2.T @ xv.reshape(-1, xv.shape[-1]),
                dz2.T @ hv.reshape(-1, hv.shape[-1]),
                dz2.sum(axis=0))
    return _make(out, inputs, vjp)
