"""Dense tensors with a reverse-mode gradient tape.

numpy holds the raw arrays and does the BLAS work; everything on top --
the tape, every backward rule, and the gradient checker -- lives here.
Training code runs in float32, verification code in float64; ops never
promote silently, mixing dtypes is an error.

Ops are recorded only while a Tape is active (``with Tape() as tape:``),
so inference and oracle code pays no bookkeeping cost. Every forward op
checks its output for NaN/Inf and raises instead of propagating garbage.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


_ACTIVE_TAPE = None
_FINITE_CHECKS = True

# Multiply counter used by the scaling benchmark. When enabled, each op
# adds its cost per the convention documented in bench.count_flops_backbone.
_FLOP_COUNT = None


class no_finite_checks:
    """Context manager that disables per-op NaN/Inf checks (timing runs)."""

    def __enter__(self):
        global _FINITE_CHECKS
        self._saved = _FINITE_CHECKS
        _FINITE_CHECKS = False
        return self

    def __exit__(self, *exc):
        global _FINITE_CHECKS
        _FINITE_CHECKS = self._saved
        return False


class count_multiplies:
    """Context manager that accumulates per-op multiply counts.

    Usage: ``with count_multiplies() as c: ...; c.total``
    """

    def __enter__(self):
        global _FLOP_COUNT
        self.total = 0
        self._saved = _FLOP_COUNT
        _FLOP_COUNT = self
        return self

    def __exit__(self, *exc):
        global _FLOP_COUNT
        _FLOP_COUNT = self._saved
        return False

    def add(self, n):
        self.total += int(n)


def _count(n):
    if _FLOP_COUNT is not None:
        _FLOP_COUNT.add(n)


class Tensor:
    """Immutable dense array, optionally participating in the active tape.

    ``grad_id`` is the node index on the tape the tensor was recorded on
    (None for constants). Data must not be mutated after creation; the
    optimizer is the single exception, updating parameters between steps.
    """

    __slots__ = ("data", "requires_grad", "grad_id", "_tape_epoch")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad_id = None
        self._tape_epoch = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # Arithmetic sugar; the free functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, dtype=np.float32):
    return Tensor(data, dtype=dtype)


def parameter(data, dtype=np.float32):
    return Tensor(data, dtype=dtype, requires_grad=True)


class _Node:
    __slots__ = ("parents", "pull", "shape", "dtype", "is_leaf")

    def __init__(self, parents, pull, shape, dtype, is_leaf=False):
        self.parents = parents  # node ids
        self.pull = pull  # grad_out -> list of parent grad contributions
        self.shape = shape
        self.dtype = dtype
        self.is_leaf = is_leaf


_EPOCH = 0


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended at creation time, so the list is already in
    topological order: parents always precede children. ``backward``
    walks it once in reverse.
    """

    def __init__(self):
        global _EPOCH
        _EPOCH += 1
        self.epoch = _EPOCH
        self.nodes = []
        self._leaves = {}  # node id -> leaf Tensor

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; nesting is not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _leaf_id(self, t):
        """Register (once per tape) a requires_grad tensor as a leaf node."""
        if t._tape_epoch == self.epoch:
            return t.grad_id
        nid = len(self.nodes)
        self.nodes.append(_Node((), None, t.data.shape, t.data.dtype, is_leaf=True))
        self._leaves[nid] = t
        t.grad_id = nid
        t._tape_epoch = self.epoch
        return nid


def _node_id(t):
    """Node id of t on the active tape, or None if t does not participate."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return None
    if t._tape_epoch == tape.epoch:
        return t.grad_id
    if t.requires_grad:
        return tape._leaf_id(t)
    return None


def _record(out, inputs, pull):
    """Attach `out` to the active tape if any input participates.

    `pull(grad_out)` must return one gradient array (or None) per input,
    aligned with `inputs`; entries for non-participating inputs are
    discarded.
    """
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    ids = [_node_id(t) for t in inputs]
    if all(i is None for i in ids):
        return out
    nid = len(tape.nodes)
    tape.nodes.append(_Node(tuple(ids), pull, out.data.shape, out.data.dtype))
    out.grad_id = nid
    out._tape_epoch = tape.epoch
    return out


def _finite(arr):
    if _FINITE_CHECKS and not np.isfinite(arr).all():
        raise NonFiniteError("forward op produced non-finite values")
    return arr


def _check_same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise DimensionError(f"mixed dtypes {dt} and {t.data.dtype}")


def _broadcast_ok(a_shape, b_shape):
    """b may equal a, be a scalar, or match a's trailing dims exactly."""
    if b_shape == a_shape or b_shape == ():
        return True
    nb = len(b_shape)
    return nb < len(a_shape) and a_shape[len(a_shape) - nb:] == b_shape


def _reduce_to(grad, shape):
    """Sum grad over the leading axes that were broadcast."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra))) if extra else grad


def add(a, b):
    _check_same_dtype(a, b)
    if not (_broadcast_ok(a.shape, b.shape) or _broadcast_ok(b.shape, a.shape)):
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(_finite(a.data + b.data))

    def pull(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(out, (a, b), pull)


def sub(a, b):
    _check_same_dtype(a, b)
    if not (_broadcast_ok(a.shape, b.shape) or _broadcast_ok(b.shape, a.shape)):
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(_finite(a.data - b.data))

    def pull(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record(out, (a, b), pull)


def mul(a, b):
    _check_same_dtype(a, b)
    if not (_broadcast_ok(a.shape, b.shape) or _broadcast_ok(b.shape, a.shape)):
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    _count(max(a.data.size, b.data.size))
    out = Tensor(_finite(a.data * b.data))
    ad, bd = a.data, b.data

    def pull(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _record(out, (a, b), pull)


def neg(a):
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def scale(a, c):
    """a * c for a python scalar c."""
    c = float(c)
    _count(a.data.size)
    out = Tensor(_finite(a.data * np.asarray(c, dtype=a.data.dtype)))
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a, b):
    """Strict 2-D matrix product; higher ranks are reshaped by the caller."""
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _count(m * k * n)
    out = Tensor(_finite(a.data @ b.data))
    ad, bd = a.data, b.data

    def pull(g):
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), pull)


def sum_all(a):
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))
    shape, dt = a.data.shape, a.data.dtype

    def pull(g):
        return (np.broadcast_to(g, shape).astype(dt, copy=False),)

    return _record(out, (a,), pull)


def sum_last(a):
    """Sum over the last axis: (..., K) -> (...)."""
    out = Tensor(a.data.sum(axis=-1))
    k = a.data.shape[-1]

    def pull(g):
        return (np.broadcast_to(g[..., None], g.shape + (k,)),)

    return _record(out, (a,), pull)


def mean_all(a):
    return scale(sum_all(a), 1.0 / a.data.size)


def abs_(a):
    out = Tensor(np.abs(a.data))
    sgn = np.sign(a.data)
    return _record(out, (a,), lambda g: (g * sgn,))


def exp(a):
    _count(a.data.size)
    out = Tensor(_finite(np.exp(a.data)))
    od = out.data
    return _record(out, (a,), lambda g: (g * od,))


def sigmoid(a):
    _count(a.data.size)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(_finite(s))
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a):
    """x * sigmoid(x), fused. d/dx = s * (1 + x * (1 - s))."""
    _count(2 * a.data.size)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(_finite(a.data * s))
    xd = a.data
    return _record(out, (a,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def softplus(a):
    """log(1 + e^x) via logaddexp for overflow safety. d/dx = sigmoid(x)."""
    _count(a.data.size)
    out = Tensor(_finite(np.logaddexp(np.asarray(0.0, dtype=a.data.dtype), a.data)))
    xd = a.data
    return _record(out, (a,), lambda g: (g / (1.0 + np.exp(-xd)),))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row normalization over the last axis, then affine.

    Rows get zero mean and unit variance (eps-stabilized) before
    ``gamma * xhat + beta``.
    """
    _check_same_dtype(x, gamma, beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine params {gamma.shape}/{beta.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv_std
    _count(3 * x.data.size)
    out = Tensor(_finite(xhat * gamma.data + beta.data))
    gd = gamma.data

    def pull(g):
        # dxhat = g * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), pull)


def embedding(table, ids):
    """Row lookup: table (V, D), ids int array (...,) -> (..., D)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DimensionError("embedding: id out of range")
    out = Tensor(table.data[ids])
    v, d = table.data.shape
    dt = table.data.dtype

    def pull(g):
        dt_table = np.zeros((v, d), dtype=dt)
        np.add.at(dt_table, ids.reshape(-1), g.reshape(-1, d))
        return (dt_table,)

    return _record(out, (table,), pull)


def concat(tensors, axis):
    _check_same_dtype(*tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def pull(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), pull)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    idx = [slice(None)] * a.data.ndim
    ax = axis if axis >= 0 else a.data.ndim + axis
    if start < 0 or start + length > a.data.shape[ax]:
        raise DimensionError(f"narrow: [{start}, {start + length}) outside axis of size {a.data.shape[ax]}")
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())
    shape, dt = a.data.shape, a.data.dtype

    def pull(g):
        full = np.zeros(shape, dtype=dt)
        full[idx] = g
        return (full,)

    return _record(out, (a,), pull)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(orig),))


def backward(tape, loss, params=None):
    """Reverse sweep from a scalar loss node.

    Returns a dict mapping each participating leaf Tensor to its gradient
    Tensor. When `params` is given, every listed tensor appears in the
    result, with zeros for those the loss does not depend on.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward seed must be scalar, got shape {loss.shape}")
    if loss._tape_epoch != tape.epoch or loss.grad_id is None:
        raise ValueError("loss was not recorded on this tape")

    slots = [None] * len(tape.nodes)
    slots[loss.grad_id] = np.ones(loss.data.shape, dtype=loss.data.dtype)

    for nid in range(loss.grad_id, -1, -1):
        g = slots[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.is_leaf:
            continue
        contribs = node.pull(g)
        for pid, contrib in zip(node.parents, contribs):
            if pid is None or contrib is None:
                continue
            if slots[pid] is None:
                slots[pid] = contrib
            else:
                slots[pid] = slots[pid] + contrib
        slots[nid] = None  # free as we go

    grads = {}
    for nid, leaf in tape._leaves.items():
        g = slots[nid]
        if g is None:
            g = np.zeros(leaf.data.shape, dtype=leaf.data.dtype)
        grads[leaf] = Tensor(np.ascontiguousarray(g, dtype=leaf.data.dtype))
    if params is not None:
        for p in params:
            if p not in grads:
                grads[p] = Tensor(np.zeros(p.data.shape, dtype=p.data.dtype))
    return grads


def grad_check(f, params, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` is a deterministic scalar function of `params` (called with no
    arguments, reading the current parameter values). All params must be
    float64; the relative-error denominator is floored at 1e-8.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise DimensionError("grad_check requires float64 parameters")

    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("grad_check: f() is not finite")
    grads = backward(tape, loss, params=params)

    worst = 0.0
    for p in params:
        analytic = grads[p].data.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            fp = float(f().data)
            flat[i] = saved - step
            fm = float(f().data)
            flat[i] = saved
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("grad_check: perturbed f() is not finite")
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
    return worst
