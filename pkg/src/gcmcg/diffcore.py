"""Small define-by-run reverse-mode autodiff over dense float64 arrays.

A :class:`Tape` records every operation whose inputs need a gradient.
Leaves are registered by name with :meth:`Tape.input`; :func:`backward`
returns gradients keyed by those names.

    >>> tape = Tape()
    >>> x = tape.input("x", 3.0)
    >>> y = x * x
    >>> backward(tape, output=y)["x"]
    array(6.)
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_RANK = 3
LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense array of float64 values tied (optionally) to a tape."""

    __slots__ = ("data", "requires_grad", "tape", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, tape=None, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK} (shape {arr.shape})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; rebuilt for every forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Tensor] = {}
        self.outputs: dict[str, Tensor] = {}

    def input(self, name, value, requires_grad=True):
        if name in self.leaves:
            raise TapeError(f"duplicate input name {name!r}")
        t = Tensor(value, requires_grad=requires_grad, tape=self, name=name)
        self.leaves[name] = t
        return t

    def const(self, value):
        return Tensor(value, requires_grad=False, tape=self)

    def record(self, op, inputs, out_data, backward_fn):
        out = Tensor(out_data, requires_grad=True, tape=self)
        self.nodes.append(Node(op, inputs, out, backward_fn))
        return out


# ---------------------------------------------------------------------------
# helpers


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _as_tensor(x, tape):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, tape=tape)


def _emit(op, inputs, out_data, backward_fn):
    """Wrap a result; record a node only when some input needs a gradient."""
    tape = _tape_of(*inputs)
    if tape is not None and any(t.requires_grad for t in inputs):
        return tape.record(op, inputs, out_data, backward_fn)
    return Tensor(out_data, tape=tape)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(op, a, b, fn):
    tape = _tape_of(a, b)
    a = _as_tensor(a, tape)
    b = _as_tensor(b, tape)
    try:
        out = fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc
    return a, b, out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b, out = _binary("add", a, b, np.add)
    return _emit("add", (a, b), out,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b, out = _binary("sub", a, b, np.subtract)
    return _emit("sub", (a, b), out,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b, out = _binary("mul", a, b, np.multiply)
    return _emit("mul", (a, b), out,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b, out = _binary("div", a, b, np.divide)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _emit("div", (a, b), out, bw)


def mask_mul(x, mask):
    """Multiply by a constant (typically binary) mask; only ``x`` carries a gradient."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    return mul(x, Tensor(mask, tape=_tape_of(x)))


def pow_(x, exponent: float):
    x = _as_tensor(x, None)
    out = np.power(x.data, exponent)
    return _emit("pow", (x,), out,
                 lambda g: (g * exponent * np.power(x.data, exponent - 1.0),))


# ---------------------------------------------------------------------------
# unary nonlinearities


def exp(x):
    x = _as_tensor(x, None)
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x):
    x = _as_tensor(x, None)
    if np.any(x.data <= 0):
        bad = float(x.data.min())
        raise ValueError(f"log: non-positive input (min {bad!r}, shape {x.shape})")
    out = np.log(x.data)
    return _emit("log", (x,), out, lambda g: (g / x.data,))


def tanh(x):
    x = _as_tensor(x, None)
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x):
    x = _as_tensor(x, None)
    out = _sigmoid(x.data)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def relu(x):
    x = _as_tensor(x, None)
    pos = x.data > 0
    return _emit("relu", (x,), np.where(pos, x.data, 0.0), lambda g: (g * pos,))


def leaky_relu(x, slope=LEAKY_SLOPE):
    x = _as_tensor(x, None)
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _emit("leaky_relu", (x,), out, lambda g: (np.where(pos, g, slope * g),))


def elu(x):
    x = _as_tensor(x, None)
    pos = x.data > 0
    neg = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, neg)
    return _emit("elu", (x,), out, lambda g: (np.where(pos, g, g * (neg + 1.0)),))


def clip(x, lo, hi):
    x = _as_tensor(x, None)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clip", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


def softmax(x, axis=-1):
    x = _as_tensor(x, None)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), out, bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(x, axis=None, keepdims=False):
    x = _as_tensor(x, None)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), out, bw)


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x, None)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def concat(xs, axis=0):
    tape = _tape_of(*xs)
    xs = [_as_tensor(x, tape) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(x.shape) for x in xs)
        raise ShapeError(f"concat(axis={axis}): incompatible shapes {shapes}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(xs), out, bw)


def getitem(x, index):
    """Slicing or integer-array gather; gradients scatter-add back."""
    x = _as_tensor(x, None)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"getitem: bad index {index!r} for shape {x.shape}") from exc

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", (x,), np.array(out, dtype=np.float64), bw)


def reshape(x, shape):
    x = _as_tensor(x, None)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = _as_tensor(x, None)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def broadcast_rows(x, n):
    """Repeat a vector (or 1×D row) ``n`` times along a new leading axis."""
    x = _as_tensor(x, None)
    row = x.data.reshape(1, -1) if x.ndim == 1 else x.data
    out = np.repeat(row, n, axis=0)
    return _emit("broadcast_rows", (x,), out, lambda g: (g.sum(axis=0).reshape(x.shape),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b, out = _binary("matmul", a, b, np.matmul)

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return g[..., None] * bd, np.einsum("...ij,...i->j", ad, g)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), out, bw)


def conv1d(x, w, b=None, stride=1):
    """Valid 1-D cross-correlation.

    ``x`` is (batch, in_ch, length) or (in_ch, length); ``w`` is
    (out_ch, in_ch, kernel); output is (batch, out_ch, steps).
    """
    tape = _tape_of(x, w, b)
    x = _as_tensor(x, tape)
    w = _as_tensor(w, tape)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or w.ndim != 3 or xd.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    length = xd.shape[2]
    if length < k:
        raise ShapeError(f"conv1d: sequence length {length} shorter than kernel {k}")
    steps = (length - k) // stride + 1
    win = sliding_window_view(xd, k, axis=2)[:, :, ::stride, :][:, :, :steps, :]
    out = np.einsum("bctk,ock->bot", win, w.data, optimize=True)
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b, tape)
        out = out + b.data[None, :, None]
        inputs.append(b)
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        gw = np.einsum("bot,bctk->ock", gd, win, optimize=True)
        gwin = np.einsum("bot,ock->bctk", gd, w.data, optimize=True)
        gx = np.zeros_like(xd)
        span = stride * (steps - 1) + 1
        for j in range(k):
            gx[:, :, j:j + span:stride] += gwin[:, :, :, j]
        grads = [gx[0] if squeeze else gx, gw]
        if b is not None:
            grads.append(gd.sum(axis=(0, 2)))
        return tuple(grads)

    return _emit("conv1d", tuple(inputs), out, bw)


# ---------------------------------------------------------------------------
# fused recurrences


def gru_sequence(x, w_in, w_rec):
    """Run a bias-free GRU over ``x`` (batch, steps, in_dim) from a zero state.

    ``w_in`` is (in_dim, 3D) = [W_update | W_reset | W_hidden] and ``w_rec``
    is (D, 3D) in the same gate order. Returns all hidden states
    (batch, steps, D).
    """
    tape = _tape_of(x, w_in, w_rec)
    x, w_in, w_rec = (_as_tensor(t, tape) for t in (x, w_in, w_rec))
    if x.ndim != 3 or w_in.shape[0] != x.shape[2] or w_rec.shape[1] != w_in.shape[1] \
            or w_rec.shape[1] != 3 * w_rec.shape[0]:
        raise ShapeError(f"gru_sequence: input {x.shape}, w_in {w_in.shape}, w_rec {w_rec.shape}")
    bsz, steps, _ = x.shape
    d = w_rec.shape[0]
    xw = x.data @ w_in.data
    uu, ur, uh = w_rec.data[:, :d], w_rec.data[:, d:2 * d], w_rec.data[:, 2 * d:]
    hs = np.zeros((bsz, steps + 1, d))
    gates = np.zeros((bsz, steps, 3 * d))
    h = hs[:, 0]
    for t in range(steps):
        a = xw[:, t]
        u = _sigmoid(a[:, :d] + h @ uu)
        r = _sigmoid(a[:, d:2 * d] + h @ ur)
        cand = np.tanh(a[:, 2 * d:] + (r * h) @ uh)
        h = (1.0 - u) * h + u * cand
        hs[:, t + 1] = h
        gates[:, t, :d] = u
        gates[:, t, d:2 * d] = r
        gates[:, t, 2 * d:] = cand
    out = hs[:, 1:].copy()

    def bw(g):
        dxw = np.zeros_like(xw)
        drec = np.zeros_like(w_rec.data)
        dh_next = np.zeros((bsz, d))
        for t in range(steps - 1, -1, -1):
            hp = hs[:, t]
            u = gates[:, t, :d]
            r = gates[:, t, d:2 * d]
            cand = gates[:, t, 2 * d:]
            dh = g[:, t] + dh_next
            da_h = dh * u * (1.0 - cand * cand)
            du = dh * (cand - hp)
            da_u = du * u * (1.0 - u)
            d_rh = da_h @ uh.T
            da_r = d_rh * hp * r * (1.0 - r)
            dh_next = dh * (1.0 - u) + d_rh * r + da_u @ uu.T + da_r @ ur.T
            drec[:, :d] += hp.T @ da_u
            drec[:, d:2 * d] += hp.T @ da_r
            drec[:, 2 * d:] += (r * hp).T @ da_h
            dxw[:, t, :d] = da_u
            dxw[:, t, d:2 * d] = da_r
            dxw[:, t, 2 * d:] = da_h
        dx = dxw @ w_in.data.T
        dw_in = np.einsum("bti,btj->ij", x.data, dxw, optimize=True)
        return dx, dw_in, drec

    return _emit("gru_sequence", (x, w_in, w_rec), out, bw)


def lstm_sequence(x, w_in, w_rec):
    """Bias-free LSTM from zero state; gate order [input | forget | cell | output]."""
    tape = _tape_of(x, w_in, w_rec)
    x, w_in, w_rec = (_as_tensor(t, tape) for t in (x, w_in, w_rec))
    if x.ndim != 3 or w_in.shape[0] != x.shape[2] or w_rec.shape[1] != w_in.shape[1] \
            or w_rec.shape[1] != 4 * w_rec.shape[0]:
        raise ShapeError(f"lstm_sequence: input {x.shape}, w_in {w_in.shape}, w_rec {w_rec.shape}")
    bsz, steps, _ = x.shape
    d = w_rec.shape[0]
    xw = x.data @ w_in.data
    hs = np.zeros((bsz, steps + 1, d))
    cs = np.zeros((bsz, steps + 1, d))
    acts = np.zeros((bsz, steps, 4 * d))
    for t in range(steps):
        a = xw[:, t] + hs[:, t] @ w_rec.data
        i = _sigmoid(a[:, :d])
        f = _sigmoid(a[:, d:2 * d])
        c_new = np.tanh(a[:, 2 * d:3 * d])
        o = _sigmoid(a[:, 3 * d:])
        cs[:, t + 1] = f * cs[:, t] + i * c_new
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])
        acts[:, t] = np.concatenate([i, f, c_new, o], axis=1)
    out = hs[:, 1:].copy()

    def bw(g):
        da_all = np.zeros_like(xw)
        drec = np.zeros_like(w_rec.data)
        dh_next = np.zeros((bsz, d))
        dc_next = np.zeros((bsz, d))
        for t in range(steps - 1, -1, -1):
            i, f, c_new, o = (acts[:, t, k * d:(k + 1) * d] for k in range(4))
            tc = np.tanh(cs[:, t + 1])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            da = np.concatenate([
                dc * c_new * i * (1.0 - i),
                dc * cs[:, t] * f * (1.0 - f),
                dc * i * (1.0 - c_new * c_new),
                dh * tc * o * (1.0 - o),
            ], axis=1)
            drec += hs[:, t].T @ da
            dh_next = da @ w_rec.data.T
            dc_next = dc * f
            da_all[:, t] = da
        dx = da_all @ w_in.data.T
        dw_in = np.einsum("bti,btj->ij", x.data, da_all, optimize=True)
        return dx, dw_in, drec

    return _emit("lstm_sequence", (x, w_in, w_rec), out, bw)


# ---------------------------------------------------------------------------
# driver functions


def forward(fn: Callable, inputs: dict, requires_grad=True):
    """Build a fresh tape, run ``fn`` on named input tensors, return (tape, outputs).

    ``requires_grad`` may be a bool or a set of input names.
    """
    tape = Tape()
    tensors = {}
    for name, value in inputs.items():
        rg = requires_grad if isinstance(requires_grad, bool) else name in requires_grad
        tensors[name] = tape.input(name, value, requires_grad=rg)
    result = fn(tensors)
    if isinstance(result, Tensor):
        tape.outputs = {"out": result}
    else:
        tape.outputs = dict(result)
    return tape, result


def backward(tape: Tape, seed=None, output=None):
    """Accumulate d(seed . output)/d(leaf) for every grad-requiring named leaf."""
    if output is None:
        if not tape.outputs:
            raise TapeError("backward called before forward: tape has no outputs")
        if len(tape.outputs) != 1:
            raise TapeError(f"tape has {len(tape.outputs)} outputs; pass output=")
        output = next(iter(tape.outputs.values()))
    if output.tape is not tape:
        raise TapeError("output was not produced on this tape")
    if seed is None:
        seed = np.ones_like(output.data)
    seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")

    grads = {id(output): seed}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    for name, leaf in tape.leaves.items():
        if leaf.requires_grad:
            g = grads.get(id(leaf))
            result[name] = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
    return result


def grad_check(fn: Callable, point: dict, step=1e-4, names=None):
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"grad_check step {step} outside [1e-6, 1e-3]")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    names = list(point) if names is None else list(names)
    tape, out = forward(fn, point, requires_grad=set(names))
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    analytic = backward(tape, output=out)

    def value(p):
        _, o = forward(fn, p, requires_grad=False)
        return float(o.data)

    worst = 0.0
    for name in names:
        base = point[name]
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value(point)
            flat[i] = orig - step
            down = value(point)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
