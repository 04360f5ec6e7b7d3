"""Reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records operations in execution order (which is a
topological order by construction); :meth:`Tape.backward` walks the
records in reverse and accumulates gradients into ``Tensor.grad``.
Activation tensors are rank-4 ``(n, c, h, w)``; matrices, vectors and
scalars appear at the edges (projection matrices, classifier weights,
losses). There is no implicit broadcasting: elementwise ops require
identical shapes and raise :class:`~caproj.errors.ShapeError` otherwise.

Gradients at exactly zero relu inputs are defined as zero. Reductions
are evaluated by numpy in a fixed serial order, so identical inputs
give bit-identical outputs run to run.
"""

import threading

import numpy as np

from . import kernels
from .errors import ShapeError

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


class Tensor:
    """Value node: float64 data plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

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

    def grad_array(self):
        """Gradient buffer, with zeros for leaves backward never reached."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


class _OpRecord:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered operation log for one forward pass."""

    def __init__(self):
        self._records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss):
        """Seed d(loss)/d(loss)=1 and accumulate grads in reverse order."""
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for rec in reversed(self._records):
            out_grad = rec.output.grad
            if out_grad is None:
                continue
            grads = rec.backward(out_grad)
            for inp, g in zip(rec.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = g
                else:
                    inp.grad = inp.grad + g


def tape_active():
    """True when a Tape context is currently recording."""
    return bool(_tape_stack())


def record(output, inputs, backward):
    """Attach an op to the active tape if any input participates in grad.

    Exposed so other modules can define custom differentiable ops
    (the orthonormal projection map does).
    """
    needs = any(t.requires_grad for t in inputs)
    output.requires_grad = needs
    if not needs:
        return output
    stack = _tape_stack()
    if stack:
        stack[-1]._records.append(_OpRecord(output, tuple(inputs), backward))
    return output


def _require_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b):
    _require_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def sub(a, b):
    _require_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (g, -g))


def scalar_mul(a, s):
    s = float(s)
    out = Tensor(a.data * s)
    return record(out, (a,), lambda g: (g * s,))


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    return record(out, (a,), lambda g: (g * mask,))


def reduce_sum(a):
    out = Tensor(np.sum(a.data))
    shape = a.shape
    return record(out, (a,), lambda g: (np.full(shape, float(g)),))


def frobenius_sq(a):
    """Sum of squared entries, as a scalar tensor."""
    out = Tensor(np.sum(a.data * a.data))
    data = a.data
    return record(out, (a,), lambda g: (2.0 * float(g) * data,))


def transpose2d(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose2d: expected a matrix, got shape {a.shape}")
    out = Tensor(a.data.T.copy())
    return record(out, (a,), lambda g: (g.T.copy(),))


# ---------------------------------------------------------------------------
# structural ops


def flatten(a):
    """(n, c, h, w) -> (n, c*h*w), row-major."""
    if a.ndim != 4:
        raise ShapeError(f"flatten: expected rank-4 input, got shape {a.shape}")
    n = a.shape[0]
    shape = a.shape
    out = Tensor(a.data.reshape(n, -1))
    return record(out, (a,), lambda g: (g.reshape(shape),))


def avg_pool(a, k):
    """Non-overlapping k*k average pooling; h and w must divide by k."""
    if a.ndim != 4:
        raise ShapeError(f"avg_pool: expected rank-4 input, got shape {a.shape}")
    k = int(k)
    if k < 1:
        raise ValueError(f"avg_pool: kernel must be >= 1, got {k}")
    n, c, h, w = a.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool: spatial dims {(h, w)} not divisible by kernel {k}")
    oh, ow = h // k, w // k
    view = a.data.reshape(n, c, oh, k, ow, k)
    out = Tensor(view.mean(axis=(3, 5)))
    inv = 1.0 / (k * k)

    def backward(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] * inv, (n, c, oh, k, ow, k))
        return (gx.reshape(n, c, h, w).copy(),)

    return record(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear-algebra ops


def linear(x, w, b):
    """x @ w.T + b with x (n, d), w (m, d), b (m,)."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear: expected matrices, got x {x.shape}, w {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: feature dims differ: x {x.shape} vs w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight rows {w.shape}")
    out = Tensor(x.data @ w.data.T + b.data)
    xd, wd = x.data, w.data

    def backward(g):
        return (g @ wd, g.T @ xd, g.sum(axis=0))

    return record(out, (x, w, b), backward)


def channel_project(x, p):
    """Mix channels of (n, c, h, w) by p (c, r): out[n,j] = sum_m p[m,j] x[n,m]."""
    if x.ndim != 4:
        raise ShapeError(f"channel_project: expected rank-4 input, got {x.shape}")
    if p.ndim != 2 or p.shape[0] != x.shape[1]:
        raise ShapeError(
            f"channel_project: projection {p.shape} does not match input channels of {x.shape}"
        )
    out = Tensor(np.einsum("nchw,cr->nrhw", x.data, p.data, optimize=True))
    xd, pd = x.data, p.data

    def backward(g):
        gx = np.einsum("nrhw,cr->nchw", g, pd, optimize=True)
        gp = np.einsum("nchw,nrhw->cr", xd, g, optimize=True)
        return (gx, gp)

    return record(out, (x, p), backward)


def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlation of (n, c_in, h, w) with (c_out, c_in, k, k) plus bias.

    Output spatial dims: floor((h + 2*padding - k)/stride) + 1.
    Implemented as im2col + GEMM; the gather/scatter runs on the active
    kernel backend.
    """
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected rank-4 operands, got x {x.shape}, w {w.shape}")
    n, c_in, h, wd_ = x.shape
    c_out, wc_in, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got weight {w.shape}")
    k = kh
    if wc_in != c_in:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match weight rows {w.shape}")
    hp, wp = h + 2 * padding, wd_ + 2 * padding
    if k > hp or k > wp:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {(hp, wp)}")
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1

    if padding:
        xp = np.zeros((n, c_in, hp, wp), dtype=np.float64)
        xp[:, :, padding : padding + h, padding : padding + wd_] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    cols = kernels.im2col(xp, k, stride, oh, ow)
    wmat = w.data.reshape(c_out, c_in * k * k)
    out_mat = cols @ wmat.T + b.data
    out = Tensor(np.ascontiguousarray(out_mat.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, c_out)
        gw = (gm.T @ cols).reshape(c_out, c_in, k, k)
        gb = gm.sum(axis=0)
        gcols = gm @ wmat
        gxp = kernels.col2im(gcols, n, c_in, hp, wp, k, stride, oh, ow)
        if padding:
            gx = gxp[:, :, padding : padding + h, padding : padding + wd_].copy()
        else:
            gx = gxp
        return (gx, gw, gb)

    return record(out, (x, w, b), backward)


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy of (n, k) logits against int class labels (n,)."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (n, k) logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: labels {labels.shape} do not match logits {logits.shape}"
        )
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("softmax_cross_entropy: label out of range")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    out = Tensor(nll.mean())

    def backward(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        return (gl * (float(g) / n),)

    return record(out, (logits,), backward)


def as_tensor(x, requires_grad=False, name=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad, name=name)
