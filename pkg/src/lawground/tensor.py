"""Dense float64 tensors with taped reverse-mode differentiation.

Operations run eagerly on numpy. When a Tape is active, each differentiable
op records a closure mapping the output adjoint to input adjoints; backward
replays the records in exact reverse execution order (any execution order is
its own topological order). Everything is float64 with fixed reduction
orders, so repeated runs are bit-identical.
"""

import threading

import numpy as np
from scipy.special import erf, expit

from .errors import NumericError, ShapeError, TapeError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

# Additive logit bias for masked softmax entries. Finite logits are absorbed
# (|x| < ulp(1e30)/2), so masked slots compare equal regardless of content and
# underflow to exactly 0.0 after the max-subtracted exp.
MASK_NEG = -1e30

# sigmoid outputs are clamped into the open interval (0,1); the true gradient
# beyond these saturations is < 4e-17, so clamping does not disturb training.
_SIG_HI = float(np.nextafter(1.0, 0.0))
_SIG_LO = 1e-300

_local = threading.local()


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape():
    """The innermost active Tape on this thread, or None."""
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around the forward pass; ops created inside are
    recorded in execution order. ``backward`` walks the record once, in
    reverse, accumulating into the ``grad`` buffers of requires_grad leaves.
    """

    def __init__(self):
        self._entries = []  # (out, parents, backfn) in execution order
        self._consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self
        return False

    def record(self, out, parents, backfn):
        """Append one op: backfn(out_adjoint) -> per-parent adjoints (or None)."""
        out._tape = self
        self._entries.append((out, parents, backfn))

    def backward(self, loss):
        if loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if getattr(loss, "_tape", None) is not self:
            raise TapeError("loss was not produced on this tape (detached graph)")
        if self._consumed:
            raise TapeError("backward already ran on this tape; build a new tape")
        if not np.isfinite(loss.data):
            raise NumericError(f"loss is not finite: {float(loss.data)}")
        self._consumed = True

        adjoint = {id(loss): np.ones((), dtype=np.float64)}
        for out, parents, backfn in reversed(self._entries):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            for parent, gp in zip(parents, backfn(g)):
                if gp is None:
                    continue
                if parent.requires_grad:
                    parent.grad += gp
                elif getattr(parent, "_tape", None) is self:
                    pid = id(parent)
                    held = adjoint.get(pid)
                    adjoint[pid] = gp if held is None else held + gp


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss into leaf grads."""
    tape = getattr(loss, "_tape", None)
    if tape is None:
        raise TapeError("loss is not attached to any tape (detached graph)")
    tape.backward(loss)


class Tensor:
    """Dense float64 array, row-major, with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        # strided views are fine internally; serialization emits row-major bytes
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        """The raw array; treat as read-only."""
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all dispatch to the module-level ops below
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, e):
        return power(self, e)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(out, parents, backfn):
    tape = active_tape()
    if tape is not None:
        tape.record(out, parents, backfn)
    return out


def _unbroadcast(g, shape):
    """Sum an adjoint down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape),
                   _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def power(x, e):
    """x**e for a float exponent; x must be positive unless e is a whole number."""
    x = as_tensor(x)
    e = float(e)
    out = Tensor(x.data ** e)
    if not np.isfinite(out.data).all():
        raise NumericError(f"power({e}) produced non-finite values")
    return _record(out, (x,), lambda g: (g * e * x.data ** (e - 1.0),))


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = Tensor(np.where(take_a, a.data, b.data))
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape),
                   _unbroadcast(g * ~take_a, b.shape)))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data))
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape),
                   _unbroadcast(g * ~take_a, b.shape)))


def absval(x):
    x = as_tensor(x)
    out = Tensor(np.abs(x.data))
    return _record(out, (x,), lambda g: (g * np.sign(x.data),))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise NumericError("log of a non-positive value")
    out = Tensor(np.log(x.data))
    return _record(out, (x,), lambda g: (g / x.data,))


def exp(x):
    x = as_tensor(x)
    out = Tensor(np.exp(x.data))
    if not np.isfinite(out.data).all():
        raise NumericError("exp overflow")
    return _record(out, (x,), lambda g: (g * out.data,))


def sigmoid(x):
    """Logistic function, clamped into the open interval (0, 1)."""
    x = as_tensor(x)
    p = np.clip(expit(x.data), _SIG_LO, _SIG_HI)
    out = Tensor(p)
    return _record(out, (x,), lambda g: (g * p * (1.0 - p),))


def gelu(x):
    """x * CDF_N(0,1)(x), exact-erf form."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)

    def backfn(g, x=x, cdf=cdf):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _record(out, (x,), backfn)


def softmax(x, axis=-1):
    """Max-subtracted softmax along `axis`; each slice sums to 1."""
    x = as_tensor(x)
    if x.data.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    if not np.isfinite(np.max(x.data)):
        raise NumericError("softmax input contains NaN or +/-Inf")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def backfn(g, y=y, axis=axis):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), backfn)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    """Matrix product over the last two axes (leading axes broadcast).

    Gradient rules: dA = dC @ B^T, dB = A^T @ dC.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backfn(g, a=a, b=b):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record(out, (a, b), backfn)


def linear(x, w, b=None):
    """x (n, k) @ w (m, k)^T -> (n, m), plus an optional (m,) bias."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    y = x.data @ w.data.T
    if b is None:
        out = Tensor(y)
        return _record(out, (x, w),
                       lambda g: (g @ w.data, g.T @ x.data))
    b = as_tensor(b)
    out = Tensor(y + b.data)
    return _record(out, (x, w, b),
                   lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)))


def matvec(w, v):
    """(m x k) @ (k,) -> (m,). Batched w is allowed: (..., m, k) @ (k,)."""
    w, v = as_tensor(w), as_tensor(v)
    if v.ndim != 1 or w.ndim < 2 or w.shape[-1] != v.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {w.shape} and {v.shape}")
    out = Tensor(w.data @ v.data)

    def backfn(g, w=w, v=v):
        if w.ndim == 2:
            return (np.multiply.outer(g, v.data), w.data.T @ g)
        gw = g[..., None] * v.data
        gv = np.tensordot(w.data, g, axes=(tuple(range(w.ndim - 1)),
                                           tuple(range(g.ndim))))
        return (gw.reshape(w.shape), gv)

    return _record(out, (w, v), backfn)


def vdot(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"vdot: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(np.dot(a.data, b.data))
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def backfn(g, x=x, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record(out, (x,), backfn)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = Tensor(np.mean(x.data, axis=axis, keepdims=keepdims))
    n = x.size if axis is None else np.prod(
        [x.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])

    def backfn(g, x=x, axis=axis, keepdims=keepdims, n=float(n)):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape),)

    return _record(out, (x,), backfn)


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = [0] * len(axes)
    for i, a in enumerate(axes):
        inv[a] = i
    out = Tensor(np.transpose(x.data, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx):
    """Basic indexing (ints/slices); gradient scatters back into place."""
    x = as_tensor(x)
    out = Tensor(x.data[idx])

    def backfn(g, x=x, idx=idx):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record(out, (x,), backfn)


def take_rows(table, ids):
    """Row gather table[ids]; the gradient scatter-adds duplicate rows."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"row index out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[ids])

    def backfn(g, table=table, ids=ids):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), backfn)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backfn(g, x=x, gain=gain, xhat=xhat, inv=inv):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, gain.shape)
        dxhat = g * gain.data
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (dx, dgain, dbias)

    return _record(out, (x, gain, bias), backfn)


# ---------------------------------------------------------------------------
# spatial ops


def transposed_conv2x(x, kernel, bias):
    """Stride-2 transposed convolution with a 2x2 kernel: (c_in,h,w) -> (c_out,2h,2w).

    Output blocks are disjoint, so each input pixel spreads its kernel into
    one 2x2 patch. The gradient w.r.t. the input is the matching forward
    convolution.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[2:] != (2, 2):
        raise ShapeError(
            f"transposed_conv2x needs (c,h,w) input and (c_in,c_out,2,2) kernel, "
            f"got {x.shape} and {kernel.shape}")
    if x.shape[0] != kernel.shape[0] or bias.shape != (kernel.shape[1],):
        raise ShapeError(
            f"channel mismatch: input {x.shape[0]}, kernel {kernel.shape[:2]}, "
            f"bias {bias.shape}")
    c_in, c_out = kernel.shape[0], kernel.shape[1]
    h, w = x.shape[1], x.shape[2]
    x_flat = x.data.reshape(c_in, h * w)
    k_flat = kernel.data.reshape(c_in, c_out * 4)
    spread = (k_flat.T @ x_flat).reshape(c_out, 2, 2, h, w)
    out_data = np.ascontiguousarray(spread.transpose(0, 3, 1, 4, 2)).reshape(
        c_out, 2 * h, 2 * w)
    out = Tensor(out_data + bias.data[:, None, None])

    def backfn(g, x_flat=x_flat, k_flat=k_flat):
        g_flat = np.ascontiguousarray(
            g.reshape(c_out, h, 2, w, 2).transpose(0, 2, 4, 1, 3)).reshape(
            c_out * 4, h * w)
        gx = (k_flat @ g_flat).reshape(c_in, h, w)
        gk = (x_flat @ g_flat.T).reshape(c_in, c_out, 2, 2)
        gb = g.sum(axis=(1, 2))
        return (gx, gk, gb)

    return _record(out, (x, kernel, bias), backfn)


_BILINEAR_CACHE = {}


def _bilinear_matrix(n, factor):
    """(n*factor, n) interpolation weights, sample centers at (i+0.5)/f-0.5,
    edges replicated. Cached: the map is fixed per (size, factor)."""
    key = (n, factor)
    cached = _BILINEAR_CACHE.get(key)
    if cached is None:
        src = (np.arange(n * factor, dtype=np.float64) + 0.5) / factor - 0.5
        i0 = np.floor(src)
        t = src - i0
        lo = np.clip(i0, 0, n - 1).astype(np.int64)
        hi = np.clip(i0 + 1, 0, n - 1).astype(np.int64)
        cached = np.zeros((n * factor, n), dtype=np.float64)
        rows = np.arange(n * factor)
        np.add.at(cached, (rows, lo), 1.0 - t)
        np.add.at(cached, (rows, hi), t)
        _BILINEAR_CACHE[key] = cached
    return cached


def bilinear_upsample(x, factor):
    """Scale a 2-D map by an integer factor with bilinear interpolation
    (align-corners-false, edge-replicated)."""
    x = as_tensor(x)
    factor = int(factor)
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 2:
        raise ShapeError(f"bilinear_upsample expects a 2-D map, got {x.shape}")
    h, w = x.shape
    wr = _bilinear_matrix(h, factor)
    wc = _bilinear_matrix(w, factor)
    out = Tensor((wr @ x.data) @ wc.T)

    def backfn(g, wr=wr, wc=wc):
        return ((wr.T @ g) @ wc,)

    return _record(out, (x,), backfn)


# ---------------------------------------------------------------------------
# verification


def grad_check(f, xs, h=1e-5):
    """Max relative error between taped gradients and central differences.

    f maps the given tensors to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    xs = [xs] if isinstance(xs, Tensor) else list(xs)
    for x in xs:
        if not x.requires_grad:
            raise TapeError("grad_check inputs must have requires_grad=True")
        x.zero_grad()
    with Tape() as tape:
        loss = f(*xs)
    tape.backward(loss)

    worst = 0.0
    for x in xs:
        analytic = x.grad.copy()
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = float(f(*xs).data)
            flat[i] = keep - h
            lo = float(f(*xs).data)
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    return worst


def assert_finite(x, what="tensor"):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.isfinite(data).all():
        raise NumericError(f"{what} contains NaN or Inf")
