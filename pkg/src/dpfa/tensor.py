"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the DPFA networks need are provided.  Operations run
eagerly; when a :class:`Graph` is active (``with Graph() as g:``) and any
input requires a gradient, the op is appended to the graph's tape, and
``g.backward(loss)`` walks the tape once in reverse insertion order.

No broadcasting beyond what each op documents.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels

_DEBUG = os.environ.get("DPFA_DEBUG", "").strip().lower() in ("1", "true", "yes", "on")


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


class Tensor:
    """Dense array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_produced")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        # not ascontiguousarray: it promotes 0-d results to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._produced = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


_local = threading.local()


def _stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_graph():
    st = _stack()
    return st[-1] if st else None


class Graph:
    """Tape of recorded ops.  Confined to the thread that entered it."""

    def __init__(self, check_finite=None):
        self.nodes: list[Node] = []
        self.check_finite = _DEBUG if check_finite is None else check_finite

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def backward(self, loss: Tensor, grad=None):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward() without grad needs a scalar, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        if not loss.requires_grad:
            return
        pending = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._produced:
                    key = id(t)
                    pending[key] = pending[key] + gi if key in pending else gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi


class no_grad:
    """Context in which ops are not recorded."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()
        return False


def _result(op, data, inputs, backward):
    out = Tensor(data)
    g = current_graph()
    if g is None:
        return out
    if g.check_finite and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NonFiniteError(f"op '{op}' (node {len(g.nodes)}) produced non-finite values")
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._produced = True
        g.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y[..., o] = sum_i x[..., i] W[i, o] + b[o]``."""
    if W.ndim != 2 or x.shape[-1:] != W.shape[:1]:
        raise DimensionError(f"linear: x has shape {x.shape}, W has shape {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias has shape {b.shape}, expected ({W.shape[1]},)")
    d_in, d_out = W.shape
    lead = x.shape[:-1]
    # 2-D products: a stacked matmul would issue one tiny GEMM per leading index
    x2 = x.data.reshape(-1, d_in)
    y = x2 @ W.data
    if b is not None:
        y += b.data
    y = y.reshape(*lead, d_out)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ W.data.T).reshape(*lead, d_in) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gW, gb

    inputs = (x, W) if b is None else (x, W, b)
    return _result("linear", y, inputs, backward)


def leaky_relu(x: Tensor, slope=0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    pos = x.data >= 0
    y = np.where(pos, x.data, x.data * slope)
    return _result("leaky_relu", y, (x,), lambda g: (np.where(pos, g, g * slope),))


def softmax_axis(x: Tensor, axis=-1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (x,), backward)


def concat_axis(xs: Sequence[Tensor], axis=-1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat of an empty list")
    axis = _check_axis(xs[0], axis)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in xs], axis=axis)

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result("concat", y, xs, backward)


def gather_rows(x: Tensor, idx) -> Tensor:
    """``out[i, j, :] = x[idx[i, j], :]``; backward scatter-adds."""
    if x.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D table, got shape {x.shape}")
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather indices must be integers")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range [0, {n}): min {idx.min()}, max {idx.max()}")
    y = x.data[idx]

    def backward(g):
        return (kernels.scatter_add_rows(g, idx, n),)

    return _result("gather_rows", y, (x,), backward)


def reduce_max_axis(x: Tensor, axis) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal slot."""
    axis = _check_axis(x, axis)
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)
    y = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result("reduce_max", y, (x,), backward)


def reduce_sum_axis(x: Tensor, axis) -> Tensor:
    axis = _check_axis(x, axis)
    y = x.data.sum(axis=axis)
    shape = x.shape
    return _result("reduce_sum", y, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return _result("hadamard", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of the 1-D tensor ``v`` into an ``(n, D)`` table."""
    if v.ndim != 1:
        raise DimensionError(f"broadcast_rows expects a vector, got shape {v.shape}")
    y = np.broadcast_to(v.data, (n, v.shape[0])).copy()
    return _result("broadcast_rows", y, (v,), lambda g: (g.sum(axis=0),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def channel_standardize(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    """Standardise each channel (last axis) over all other axes, then scale and shift."""
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"channel_standardize: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    x2 = x.data.reshape(-1, C)
    m = x2.shape[0]
    mu = x2.mean(axis=0)
    inv = 1.0 / np.sqrt(x2.var(axis=0) + eps)
    xh = (x2 - mu) * inv
    y = (xh * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, C)
        gxh = g2 * gamma.data
        gx = inv / m * (m * gxh - gxh.sum(axis=0) - xh * (gxh * xh).sum(axis=0))
        return gx.reshape(x.shape), (g2 * xh).sum(axis=0), g2.sum(axis=0)

    return _result("channel_standardize", y, (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    With per-class ``weights`` the mean is weighted by the weight of each
    sample's label.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    N, C = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (N,):
        raise DimensionError(f"cross_entropy: {N} logit rows but {labels.shape[0]} labels")
    if N and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(N)
    if weights is None:
        w = np.full(N, 1.0 / max(N, 1), dtype=logits.dtype)
    else:
        ws = np.asarray(weights, dtype=logits.dtype)[labels]
        w = ws / ws.sum()
    loss = -(w * logp[rows, labels]).sum()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (w * g)[:, None],)

    return _result("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    checked: int
    skipped: list = field(default_factory=list)
    worst: tuple | None = None

    @property
    def passed(self):
        return self.checked > 0 and self.max_rel_err < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.0e}), "
            f"{self.checked} checked, {len(self.skipped)} skipped"
        )


def grad_check(f, inputs, eps=1e-5, tol=1e-6, atol=1e-6, kink_tol=1e-3) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, atol)``.  Elements
    where the left and right one-sided slopes disagree by more than
    ``kink_tol`` sit on a non-differentiable point (a max tie, a leaky-ReLU
    corner) and are reported in ``skipped`` instead of being compared.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")
        t.grad = None
    with Graph(check_finite=True) as g:
        out = f(*inputs)
        if out.data.size != 1:
            raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
        g.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def value():
        with no_grad():
            return float(f(*inputs).data)

    f0 = value()
    worst_err, worst, checked, skipped = 0.0, None, 0, []
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        ga = analytic[k].reshape(-1)
        for e in range(flat.size):
            orig = flat[e]
            flat[e] = orig + eps
            fp = value()
            flat[e] = orig - eps
            fm = value()
            flat[e] = orig
            if abs(fp - 2.0 * f0 + fm) / eps > kink_tol:
                skipped.append((k, e))
                continue
            num = (fp - fm) / (2.0 * eps)
            err = abs(ga[e] - num) / max(abs(ga[e]), abs(num), atol)
            checked += 1
            if err >= worst_err:
                worst_err, worst = err, (k, e, float(ga[e]), num)
    return GradCheckReport(worst_err, tol, checked, skipped, worst)
