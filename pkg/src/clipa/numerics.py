"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op takes :class:`Tensor` inputs, computes its result
with numpy and, when a :class:`Tape` is active and some input requires a
gradient, appends an :class:`OpRecord` holding a closure that maps the
output cotangent to input cotangents.  Records are appended in execution
order, so walking the tape backwards is already a reverse topological
order.

The module also carries the optimizer (AdamW with decoupled weight decay),
the warmup + cosine learning-rate schedule and the seeded random streams
used everywhere else in the package.
"""

from __future__ import annotations

import math
import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when op inputs do not conform."""

    def __init__(self, op, *shapes):
        shapes_txt = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shapes_txt}")
        self.op = op
        self.shapes = shapes


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def _key_word(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def rng_stream(seed, *keys):
    """Independent counter-based generator for ``(seed, *keys)``.

    Keys may be ints or strings, e.g. ``rng_stream(3, "mask-image", step)``.
    The same arguments always give the same sequence; different key tuples
    give statistically independent Philox streams.
    """
    entropy = [_key_word(seed)] + [_key_word(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# tensors and the tape
# ---------------------------------------------------------------------------

class Tensor:
    """An n-d array plus a flag saying whether gradients flow into it.

    ``data`` is treated as immutable: ops never write into their inputs and
    the optimizer swaps in fresh arrays.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class OpRecord:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered log of differentiable ops executed while it is active.

    Use as a context manager::

        with Tape() as tape:
            loss = model_loss(...)
        grads = tape.gradients(loss, params)
    """

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def gradients(self, loss, params):
        return backward(self, loss, params)


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def _emit(op, inputs, out_data, backward_fn):
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(OpRecord(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape, loss, params=None):
    """Reverse pass over ``tape`` starting from the scalar ``loss``.

    Returns a list of gradient arrays aligned with ``params`` (or a dict
    keyed by ``id`` of every tensor reached when ``params`` is None).
    Parameters not connected to ``loss`` get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape)
    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if params is None:
        return grads
    return [
        np.asarray(grads[id(p)], dtype=p.dtype).reshape(p.shape) if id(p) in grads
        else np.zeros_like(p.data)
        for p in params
    ]


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("add", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, bwd)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("sub", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, bwd)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("mul", a, b)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), a.data * b.data, bwd)


def exp(x):
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _emit("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = x.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), np.sum(x.data, axis=axis, keepdims=keepdims), bwd)


def mean(x, axis=None, keepdims=False):
    shape = x.shape
    count = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(x.dtype),)

    return _emit("mean", (x,), np.mean(x.data, axis=axis, keepdims=keepdims), bwd)


def take(x, index, axis):
    """Select positions ``index`` (an int array or int) along ``axis``."""
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        if np.ndim(index) == 0:
            sl = [slice(None)] * len(shape)
            sl[axis] = index
            full[tuple(sl)] = g
        else:
            np.add.at(full, (slice(None),) * axis + (index,), g)
        return (full,)

    return _emit("take", (x,), np.take(x.data, index, axis=axis), bwd)


def embedding(table, ids):
    """Row lookup ``table[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape)

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit("embedding", (table,), table.data[ids], bwd)


def concat(tensors, axis):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", tuple(tensors), out, bwd)


def broadcast_to(x, shape):
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", src, shape) from None
    return _emit("broadcast_to", (x,), out, lambda g: (_unbroadcast(g, src),))


# ---------------------------------------------------------------------------
# linear algebra and network ops
# ---------------------------------------------------------------------------

def _swap(a):
    return np.swapaxes(a, -1, -2)


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading dims."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ _swap(b.data), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(_swap(a.data) @ g, b.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, bwd)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    if x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise ShapeError("linear", x.shape, w.shape, () if b is None else b.shape)
    x2 = x.data.reshape(-1, w.shape[0])
    out2 = x2 @ w.data
    if b is not None:
        out2 += b.data
    out = out2.reshape(x.shape[:-1] + (w.shape[1],))

    def bwd(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", inputs, out, bwd)


def layer_norm(x, gamma, beta, eps=1e-6):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _emit("layer_norm", (x, gamma, beta), out, bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _emit("gelu", (x,), out.astype(x.dtype, copy=False), bwd)


def _softmax_np(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; ``mask`` is an additive constant (0 / -inf)."""
    z = x.data if mask is None else x.data + mask
    p = _softmax_np(z, axis)

    def bwd(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), p, bwd)


def log_softmax(x, axis=-1):
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def bwd(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), out, bwd)


def cross_entropy(logits, targets, axis=-1):
    """Mean negative log-likelihood of integer ``targets`` along ``axis``."""
    targets = np.asarray(targets)
    lsm = log_softmax(logits, axis=axis)
    picked = np.take_along_axis(lsm.data, np.expand_dims(targets, axis), axis=axis)
    n = targets.size
    shape = lsm.shape

    def bwd(g):
        full = np.zeros(shape, dtype=lsm.dtype)
        np.put_along_axis(full, np.expand_dims(targets, axis), -g / n, axis=axis)
        return (full,)

    return _emit("nll", (lsm,), np.asarray(-picked.mean(), dtype=lsm.dtype), bwd)


def attention(q, k, v, mask=None):
    """Scaled dot-product attention over the last two axes.

    ``q``, ``k``, ``v`` are (..., n, dh); ``mask`` is an additive array
    broadcastable to (..., n, n) holding 0 for visible keys and -inf for
    hidden ones.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = (q.data @ _swap(k.data)) * scale
    if mask is not None:
        s = s + mask
    p = _softmax_np(s).astype(q.dtype, copy=False)
    out = p @ v.data

    def bwd(g):
        gv = _swap(p) @ g
        gp = g @ _swap(v.data)
        gs = p * (gp - np.sum(gp * p, axis=-1, keepdims=True))
        gq = (gs @ k.data) * scale
        gk = (_swap(gs) @ q.data) * scale
        return gq, gk, gv

    return _emit("attention", (q, k, v), out, bwd)


def l2_normalize(x, axis=-1, eps=1e-8):
    """Unit-norm rows.  Rows with norm < ``eps`` map to the first basis vector."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    small = norm < eps
    safe = np.where(small, 1.0, norm)
    out = x.data / safe
    if np.any(small):
        basis = np.zeros(x.shape[axis], dtype=x.dtype)
        basis[0] = 1.0
        shape = [1] * x.ndim
        shape[axis] = -1
        out = np.where(small, basis.reshape(shape), out)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        gx = (g - out * dot) / safe
        return (np.where(small, 0.0, gx).astype(x.dtype, copy=False),)

    return _emit("l2_normalize", (x,), out.astype(x.dtype, copy=False), bwd)


def stop_gradient(x):
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """AdamW moments keyed by parameter name.

    ``no_decay`` lists parameter names exempt from weight decay.
    """

    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.2
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    no_decay: frozenset = frozenset()


def adamw_step(state, params, grads, lr):
    """One AdamW update, in place on ``params`` (a name -> Tensor mapping).

    Bias-corrected moments; weight decay is decoupled, i.e. ``p -= lr*wd*p``
    independent of the gradient.  Each parameter receives a fresh array.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = p.data
        if state.weight_decay and name not in state.no_decay:
            new = new * (1.0 - lr * state.weight_decay)
        p.data = (new - lr * update).astype(p.dtype, copy=False)
    return params


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0


def lr_at_step(step, cfg):
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr``.

    Steps past ``total_steps`` clamp to the final value.
    """
    step = min(max(step, 0), cfg.total_steps)
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.base_lr
    frac = (step - cfg.warmup_steps) / span
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


def global_finite(arrays: Sequence[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def gradient_check(fn, params, eps=1e-5):
    """Largest relative error between tape gradients and central differences.

    ``fn`` builds a scalar loss from ``params`` (a name -> Tensor mapping).
    Each tensor's error is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|)``, so entries that are zero up to rounding do not dominate.
    Returns ``(worst error, {name: error})``.
    """
    names = list(params)
    with Tape() as tape:
        loss = fn()
    analytic = backward(tape, loss, [params[k] for k in names])
    errors = {}
    for name, g in zip(names, analytic):
        p = params[name]
        p.data = np.array(p.data, copy=True)
        flat = p.data.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
            flat[i] = orig
            num[i] = (up - down) / (2 * eps)
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        scale = max(np.abs(g).max(), np.abs(num).max())
        errors[name] = 0.0 if scale == 0 else float(np.abs(g - num).max() / scale)
    return max(errors.values()), errors
