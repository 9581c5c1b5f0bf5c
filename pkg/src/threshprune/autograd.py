"""Reverse-mode automatic differentiation on numpy arrays.

A dynamic tape records every differentiable op in forward order and
``backward()`` replays the records in exact reverse order, so gradient
evaluation order (and therefore floating-point results) is deterministic
run to run. Arithmetic defaults to float64; float32 can be selected per
tensor for speed runs. One tape per thread: independent graphs on separate
threads share no mutable state.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf while debug validation is enabled."""


class _State(threading.local):
    def __init__(self):
        self.records = []  # (out, parents, vjp), appended in forward order
        self.recording = True
        self.validate = False


_state = _State()


def reset_tape():
    """Drop all recorded ops. Called at the start of every training step."""
    _state.records.clear()


def tape_size():
    return len(_state.records)


def set_debug_validation(enabled):
    """When enabled, every op output is checked for NaN/Inf."""
    _state.validate = bool(enabled)


@contextmanager
def no_grad():
    """Disable tape recording, e.g. around evaluation passes."""
    prev = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class Tensor:
    """N-dimensional float array with an optional gradient accumulator.

    Leaf tensors built with ``requires_grad=True`` always hold a zeroed
    ``grad`` array, so parameters that never touch the loss report an
    exact zero gradient after ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None

    @classmethod
    def _from_op(cls, data, requires_grad):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None  # filled lazily by backward()
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Small operator surface; the named functions below are the real API.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def astensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _apply(name, out_data, parents, vjp):
    if _state.validate and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{name}: non-finite values in op output")
    requires = _state.recording and any(p.requires_grad for p in parents)
    out = Tensor._from_op(out_data, requires)
    if requires:
        _state.records.append((out, parents, vjp))
    return out


def backward(loss):
    """Accumulate d(loss)/d(tensor) into ``grad`` of every tensor on the path.

    Walks the tape in exact reverse of the recorded forward order. Repeated
    calls without ``zero_grad`` add their contributions (adjoints for one
    call are kept separately, so nothing is double counted).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar-shaped, got shape {loss.data.shape}")
    adjoint = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    for out, parents, vjp in reversed(_state.records):
        g = adjoint.get(id(out))
        if g is None:
            continue  # not on a path to the loss
        for parent, pg in zip(parents, vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in adjoint:
                adjoint[pid] = adjoint[pid] + pg
            else:
                adjoint[pid] = pg
                tensors[pid] = parent
    for tid, g in adjoint.items():
        t = tensors[tid]
        if not t.requires_grad:
            continue
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(name, a, b):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{name}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def add(a, b):
    a, b = astensor(a), astensor(b)
    _broadcast_check("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _apply("add", out, (a, b), vjp)


def mul(a, b):
    a, b = astensor(a), astensor(b)
    _broadcast_check("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _apply("mul", out, (a, b), vjp)


def scalar_mul(a, c):
    a = astensor(a)
    c = float(c)
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _apply("scalar_mul", out, (a,), vjp)


def relu(a):
    a = astensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return _apply("relu", out, (a,), vjp)


def stable_sigmoid(x):
    """Numerically stable logistic function on a raw array."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = astensor(a)
    s = stable_sigmoid(a.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _apply("sigmoid", s, (a,), vjp)


def square(a):
    a = astensor(a)
    out = a.data * a.data

    def vjp(g):
        return (g * (2.0 * a.data),)

    return _apply("square", out, (a,), vjp)


def absval(a):
    a = astensor(a)
    out = np.abs(a.data)

    def vjp(g):
        return (g * np.sign(a.data),)

    return _apply("absval", out, (a,), vjp)


def sum(a):  # noqa: A001 - mirrors numpy naming
    a = astensor(a)
    out = np.asarray(a.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _apply("sum", out, (a,), vjp)


def mean(a):
    a = astensor(a)
    out = np.asarray(a.data.mean())
    n = a.data.size

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _apply("mean", out, (a,), vjp)


def reshape(a, shape):
    a = astensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _apply("reshape", out, (a,), vjp)


def flatten(a):
    """Collapse all but the leading (batch) axis."""
    a = astensor(a)
    if a.ndim < 2:
        raise ShapeError(f"flatten: need a batch axis, got shape {a.data.shape}")
    return reshape(a, (a.data.shape[0], -1))


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} are incompatible")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _apply("matmul", out, (a, b), vjp)


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    cols = np.ascontiguousarray(windows).reshape(b, c * kh * kw, oh * ow)
    return cols, oh, ow


def _col2im(cols, xshape, kh, kw, stride, pad, oh, ow):
    b, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    gx = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[
                :, :, i, j
            ]
    if pad:
        gx = gx[:, :, pad : pad + h, pad : pad + w]
    return gx


def conv2d(x, kernel, stride=1, padding=0):
    """2-D cross-correlation of NCHW input with OIHW kernel."""
    x, kernel = astensor(x), astensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d: need NCHW input and OIHW kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    if x.data.shape[1] != kernel.data.shape[1]:
        raise ShapeError(
            f"conv2d: input channels of {x.data.shape} do not match kernel {kernel.data.shape}"
        )
    b = x.data.shape[0]
    co, ci, kh, kw = kernel.data.shape
    if x.data.shape[2] + 2 * padding < kh or x.data.shape[3] + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kernel.data.shape} larger than padded input {x.data.shape}"
        )
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    k2 = kernel.data.reshape(co, ci * kh * kw)
    out = np.matmul(k2, cols).reshape(b, co, oh, ow)

    def vjp(g):
        g2 = g.reshape(b, co, oh * ow)
        gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.data.shape)
        gcols = np.matmul(k2.T, g2)
        gx = _col2im(gcols, x.data.shape, kh, kw, stride, padding, oh, ow)
        return gx, gk

    return _apply("conv2d", out, (x, kernel), vjp)


def avgpool2d(x, kernel):
    """Non-overlapping average pooling with a square window."""
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: need NCHW input, got shape {x.data.shape}")
    b, c, h, w = x.data.shape
    k = int(kernel)
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: window {k} does not tile input {x.data.shape}")
    out = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return _apply("avgpool2d", out, (x,), vjp)


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    training,
    momentum=0.1,
    eps=1e-5,
):
    """Per-channel batch normalization for NCHW input.

    In training mode normalizes with batch statistics and updates the
    running buffers in place (plain arrays, not tensors); in eval mode the
    running buffers are used as constants.
    """
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: need NCHW input, got shape {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: affine shapes {gamma.data.shape}/{beta.data.shape} do not match {c} channels"
        )
    axes = (0, 2, 3)
    gb = gamma.data.reshape(1, c, 1, 1)

    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
        # Unbiased variance for the running buffer, matching common practice.
        bessel = m / (m - 1) if m > 1 else 1.0
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * bessel

        def vjp(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gb
            t1 = dxhat.sum(axis=axes, keepdims=True)
            t2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = (ivar.reshape(1, c, 1, 1) / m) * (m * dxhat - t1 - xhat * t2)
            return dx, dgamma, dbeta

    else:
        ivar = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)

        def vjp(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dx = g * gb * ivar.reshape(1, c, 1, 1)
            return dx, dgamma, dbeta

    out = gb * xhat + beta.data.reshape(1, c, 1, 1)
    return _apply("batchnorm2d", out, (x, gamma, beta), vjp)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy between row-softmax of logits and integer labels."""
    logits = astensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.data.shape}")
    if labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match logits {logits.data.shape}"
        )
    n, k = logits.data.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"softmax_cross_entropy: labels out of range for {k} classes")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = np.asarray((lse[:, 0] - z[rows, labels]).mean())

    def vjp(g):
        p = np.exp(z - lse)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _apply("softmax_cross_entropy", out, (logits,), vjp)
