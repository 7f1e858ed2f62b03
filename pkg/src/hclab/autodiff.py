"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tensor wraps a numpy array plus an optional gradient accumulator. Ops
record TapeNodes; Tensor.backward() walks the tape once in reverse
topological order and accumulates gradients additively. The op set is
exactly what the model and the constrained residual generators need,
nothing more: no views, no higher-order derivatives, f64 only.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import _kernels

RMS_EPS = 1e-5
MAX_INVERSE_DIM = 16

_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    pass


class SingularMatrixError(ValueError):
    def __init__(self, pivot_index):
        self.pivot_index = pivot_index
        super().__init__(f"singular matrix: no usable pivot at column {pivot_index}")


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeNode:
    """One recorded op: identifier, input tensors, and a closure holding the
    saved forward values needed by the backward rule."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

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
        return float(self.data.reshape(-1)[0])

    def finite(self):
        """True when every entry is finite (no NaN or Inf)."""
        return bool(np.isfinite(self.data).all())

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate gradients of (seeded) self into every reachable input."""
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise DimensionError(
                    f"backward seed shape {seed.shape} != output shape {self.data.shape}"
                )
        # iterative post-order DFS: every node visited exactly once
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.inputs:
                    if p.requires_grad:
                        stack.append((p, False))
        self.grad = seed if self.grad is None else self.grad + seed
        for t in reversed(order):
            if t.node is None or t.grad is None:
                continue
            grads = t.node.backward_fn(t.grad)
            for parent, g in zip(t.node.inputs, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if g.base is not None or g is t.grad else g
                else:
                    parent.grad = parent.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, inputs, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_elementwise(a, b, op):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, "mul", (a, b), bwd)


def scale(x, s):
    """Multiply by a scalar (python float or scalar Tensor gate)."""
    x = _as_tensor(x)
    if isinstance(s, Tensor):
        if s.size != 1:
            raise DimensionError(f"scale: scalar expected, got shape {s.shape}")
        sval = float(s.data.reshape(()))
        xd = x.data

        def bwd(g):
            return g * sval, np.asarray((g * xd).sum()).reshape(s.shape)

        return _make(x.data * sval, "scale", (x, s), bwd)
    sval = float(s)

    def bwd(g):
        return (g * sval,)

    return _make(x.data * sval, "scale", (x,), bwd)


def tanh(x):
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _make(y, "tanh", (x,), bwd)


def sigmoid(x):
    x = _as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _make(y, "sigmoid", (x,), bwd)


def gelu(x):
    """tanh-approximation GELU used by the MLP branches."""
    x = _as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return _make(y, "gelu", (x,), bwd)


def bias_add(x, b):
    """Add b broadcast over the leading axes of x (b matches trailing dims)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.shape != x.shape[x.ndim - b.ndim :]:
        raise DimensionError(f"bias_add: {b.shape} does not match trailing dims of {x.shape}")

    def bwd(g):
        return g, _unbroadcast(g, b.shape)

    return _make(x.data + b.data, "bias_add", (x, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(ad, bd), "matmul", (a, b), bwd)


def mat_inverse(a):
    """Inverse of (a stack of) square matrices via Gauss-Jordan elimination
    with partial pivoting. Sized for small mixing matrices only."""
    a = _as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"mat_inverse: square matrix expected, got {a.shape}")
    m = a.shape[-1]
    if m > MAX_INVERSE_DIM:
        raise DimensionError(f"mat_inverse: dimension {m} exceeds limit {MAX_INVERSE_DIM}")
    flat = np.ascontiguousarray(a.data.reshape(-1, m, m))
    inv, flags = _kernels.inverse_batch(flat, )
    bad = np.flatnonzero(flags >= 0)
    if bad.size:
        raise SingularMatrixError(int(flags[bad[0]]))
    inv = inv.reshape(a.shape)

    def bwd(g):
        inv_t = np.swapaxes(inv, -1, -2)
        return (-np.matmul(inv_t, np.matmul(g, inv_t)),)

    return _make(inv, "mat_inverse", (a,), bwd)


def softmax(x, axis=-1):
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, "softmax", (x,), bwd)


def rmsnorm(x, gain):
    """y = gain * x / sqrt(mean(x^2, last axis) + eps)."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    d = x.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"rmsnorm: gain shape {gain.shape} != ({d},)")
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + RMS_EPS)
    y = gd * xd * r

    def bwd(g):
        gg = g * gd
        dx = gg * r - xd * (r**3) * ((gg * xd).sum(axis=-1, keepdims=True) / d)
        dgain = (g * xd * r).reshape(-1, d).sum(axis=0)
        return dx, dgain

    return _make(y, "rmsnorm", (x, gain), bwd)


# ---------------------------------------------------------------------------
# structure ops


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), "reshape", (x,), bwd)


def permute(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), "permute", (x,), bwd)


def embedding(table, ids):
    """Row gather: table[ids]. ids is a plain integer ndarray, not a Tensor."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (dt,)

    return _make(out, "embedding", (table,), bwd)


def skew_embed(v, m):
    """Fill the strict upper triangle of an m x m matrix row-major from v and
    antisymmetrize: out = A with A[i,j] = v[idx], A[j,i] = -v[idx], zero diag."""
    v = _as_tensor(v)
    k = m * (m - 1) // 2
    if v.shape[-1] != k:
        raise DimensionError(f"skew_embed: last dim {v.shape[-1]} != m(m-1)/2 = {k}")
    iu, ju = np.triu_indices(m, 1)
    out = np.zeros(v.shape[:-1] + (m, m))
    out[..., iu, ju] = v.data
    out[..., ju, iu] = -v.data

    def bwd(g):
        return (g[..., iu, ju] - g[..., ju, iu],)

    return _make(out, "skew_embed", (v,), bwd)


def diag_embed(s):
    """(..., d) -> (..., d, d) with s on the diagonal."""
    s = _as_tensor(s)
    d = s.shape[-1]
    idx = np.arange(d)
    out = np.zeros(s.shape + (d,))
    out[..., idx, idx] = s.data

    def bwd(g):
        return (g[..., idx, idx],)

    return _make(out, "diag_embed", (s,), bwd)


def sum_all(x):
    x = _as_tensor(x)
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum()), "sum_all", (x,), bwd)


def mean_all(x):
    x = _as_tensor(x)
    shape, n = x.shape, x.size

    def bwd(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.asarray(x.data.mean()), "mean_all", (x,), bwd)


# ---------------------------------------------------------------------------
# fused ops


def cross_entropy(logits, targets):
    """Mean cross-entropy of rows of logits against integer targets."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    logp = z - np.log(e.sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), targets].mean()

    def bwd(g):
        d = p.copy()
        d[np.arange(n), targets] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss), "cross_entropy", (logits,), bwd)


def sinkhorn(logits, iters):
    """Alternating row/column normalization of exp(logits), differentiable.

    Ends on a column normalize: column sums are exactly 1, row sums carry
    the remaining residual.
    """
    logits = _as_tensor(logits)
    if logits.ndim < 2 or logits.shape[-1] != logits.shape[-2]:
        raise DimensionError(f"sinkhorn: square matrices expected, got {logits.shape}")
    if iters < 1:
        raise ValueError("sinkhorn: iters must be >= 1")
    n = logits.shape[-1]
    flat = np.ascontiguousarray(logits.data.reshape(-1, n, n))
    out, m0, iterates, scales = _kernels.sinkhorn_fwd(flat, iters)
    shape = logits.shape

    def bwd(g):
        gflat = np.ascontiguousarray(g.reshape(-1, n, n))
        return (_kernels.sinkhorn_bwd(gflat, m0, iterates, scales).reshape(shape),)

    return _make(out.reshape(shape), "sinkhorn", (logits,), bwd)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f, x, eps=1e-5):
    """Max relative error between tape gradients of scalar f and central
    finite differences, coordinate by coordinate."""
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-4]")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise DimensionError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    out.backward()
    analytic = probe.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            pert = flat.copy()
            pert[i] = saved + eps
            hi = f(Tensor(pert.reshape(x.shape))).item()
            pert[i] = saved - eps
            lo = f(Tensor(pert.reshape(x.shape))).item()
            cd = (hi - lo) / (2.0 * eps)
            err = abs(analytic[i] - cd) / max(1e-8, abs(cd))
            if err > worst:
                worst = err
    return worst
