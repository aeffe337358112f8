"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on a tensor that requires gradients records a node holding
its inputs and a backward closure. Nodes carry a monotonically increasing
sequence number, so sorting the nodes reachable from a loss by that number
recovers the recording order; ``backward`` replays it reversed.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor", "Graph", "no_grad", "is_grad_enabled", "tensor", "constant",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "sigmoid", "tanh",
    "elementwise", "matmul", "einsum", "reduce", "sum", "mean", "max",
    "reshape", "transpose", "concat", "stack", "broadcast_to", "squash",
    "softmax", "backward",
]

_counter = itertools.count()
_grad_enabled = contextvars.ContextVar("lstmcaps_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled():
    return _grad_enabled.get()


class Node:
    __slots__ = ("op", "inputs", "backward", "seq")

    def __init__(self, op, inputs, backward, seq):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.seq = seq

    def __repr__(self):
        return f"Node({self.op!r}, seq={self.seq})"


class Tensor:
    """n-dimensional float64 array participating in a differentiation graph."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, *, _node=None, _copy=True):
        arr = np.array(data, dtype=np.float64) if _copy else data
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = _node
        self.node_id = _node.seq if _node is not None else next(_counter)

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, _copy=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators -----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(x):
    """Wrap ``x`` as a non-differentiable tensor (tensors pass through)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), _copy=False)


def _result(data, op, inputs, backward_fn):
    data = np.asarray(data)
    needs = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    if not needs:
        return Tensor(data, _copy=False)
    node = Node(op, tuple(inputs), backward_fn, next(_counter))
    return Tensor(data, requires_grad=True, _node=node, _copy=False)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of trailing-dim broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, "div", (a, b), back)


def neg(a):
    a = constant(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a):
    a = constant(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    a = constant(a)
    ad = a.data
    return _result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sqrt(a):
    a = constant(a)
    out = np.sqrt(a.data)
    return _result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a):
    a = constant(a)
    out = _sigmoid(a.data)
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = constant(a)
    out = np.tanh(a.data)
    return _result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "neg": neg, "exp": exp, "log": log, "sqrt": sqrt}


def elementwise(op, a, b=None):
    """Dispatch an elementwise op by name."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} takes one operand")
        return _UNARY[op](a)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# products
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batching rules (operands of rank >= 2)."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), back)


def _parse_einsum(subscripts):
    try:
        lhs, out = subscripts.replace(" ", "").split("->")
        sa, sb = lhs.split(",")
    except ValueError:
        raise ContractError(f"einsum needs explicit 'ab,bc->ac' form, got {subscripts!r}") from None
    for s in (sa, sb, out):
        if len(set(s)) != len(s):
            raise ContractError(f"repeated index in einsum operand {s!r}")
    for s, other in ((sa, sb), (sb, sa)):
        if not set(s) <= set(out) | set(other):
            raise ContractError(f"index summed within a single operand in {subscripts!r}")
    return sa, sb, out


def einsum(subscripts, a, b):
    """Two-operand Einstein summation (no traces, no ellipsis)."""
    a, b = constant(a), constant(b)
    sa, sb, out = _parse_einsum(subscripts)
    if a.ndim != len(sa) or b.ndim != len(sb):
        raise ShapeError(f"einsum {subscripts!r} rank mismatch: {a.shape}, {b.shape}")
    dims = {}
    for s, shp in ((sa, a.shape), (sb, b.shape)):
        for k, d in zip(s, shp):
            if dims.setdefault(k, d) != d:
                raise ShapeError(f"einsum index {k!r} has sizes {dims[k]} and {d}")
    ad, bd = a.data, b.data
    res = np.einsum(f"{sa},{sb}->{out}", ad, bd, optimize=True)

    def back(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, bd, optimize=True)
        gb = np.einsum(f"{out},{sa}->{sb}", g, ad, optimize=True)
        return ga, gb

    return _result(res, "einsum", (a, b), back)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _check_axis(a, axis):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ShapeError(f"axis {ax} out of range for rank {a.ndim}")
        out.append(ax % a.ndim)
    return tuple(out)


def _expand(g, shape, axes, keepdims):
    if axes is not None and not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    a = constant(a)
    axes = _check_axis(a, axis)
    shape = a.shape
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    return _result(np.asarray(out), "sum", (a,),
                   lambda g: (_expand(g, shape, axes, keepdims).copy(),))


def mean(a, axis=None, keepdims=False):
    a = constant(a)
    axes = _check_axis(a, axis)
    shape = a.shape
    n = a.size if axes is None else int(np.prod([shape[i] for i in axes]))
    out = np.mean(a.data, axis=axes, keepdims=keepdims)
    return _result(np.asarray(out), "mean", (a,),
                   lambda g: (_expand(g, shape, axes, keepdims) / n,))


def max(a, axis=None, keepdims=False):
    """Maximum; the gradient goes to the first occurrence of the maximum."""
    a = constant(a)
    if axis is not None and not np.isscalar(axis):
        raise ContractError("max reduces over a single axis or all axes")
    axes = _check_axis(a, axis)
    ad = a.data
    if axes is None:
        idx = int(np.argmax(ad))
        out = np.asarray(ad.reshape(-1)[idx])
        if keepdims:
            out = out.reshape((1,) * ad.ndim)

        def back(g):
            full = np.zeros(ad.size)
            full[idx] = np.asarray(g).reshape(-1)[0]
            return (full.reshape(ad.shape),)
    else:
        ax = axes[0]
        idx = np.expand_dims(np.argmax(ad, axis=ax), ax)
        out = np.take_along_axis(ad, idx, axis=ax)
        if not keepdims:
            out = np.squeeze(out, axis=ax)

        def back(g):
            full = np.zeros_like(ad)
            gk = g if keepdims else np.expand_dims(g, ax)
            np.put_along_axis(full, idx, gk, axis=ax)
            return (full,)

    return _result(out, "max", (a,), back)


_REDUCE = {"sum": sum, "mean": mean, "max": max}


def reduce(op, a, axis=None, keepdims=False):
    if op not in _REDUCE:
        raise ContractError(f"unknown reduction {op!r}")
    return _REDUCE[op](a, axis, keepdims)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = constant(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = constant(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,),
                   lambda g: (np.transpose(g, inv),))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer, type(None), type(Ellipsis))) for i in items)


def getitem(a, index):
    a = constant(a)
    ad = a.data
    out = ad[index]
    if out.ndim and 0 in out.shape:
        raise ShapeError(f"index {index!r} selects an empty slice")
    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros_like(ad)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out) if basic else out, "getitem", (a,), back)


def concat(tensors, axis=0):
    ts = [constant(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    nd = ts[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"axis {axis} out of range for rank {nd}")
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"cannot concat shapes {ts[0].shape} and {t.shape} on axis {ax}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _result(out, "concat", tuple(ts),
                   lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(tensors, axis=0):
    ts = [constant(t) for t in tensors]
    if not ts:
        raise ContractError("stack needs at least one tensor")
    if any(t.shape != ts[0].shape for t in ts):
        raise ShapeError("stack needs equal shapes")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    return _result(out, "stack", tuple(ts),
                   lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(ts))))


def broadcast_to(a, shape):
    a = constant(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {old} to {shape}") from None
    return _result(np.array(out), "broadcast_to", (a,), lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------------------
# fused nonlinearities
# ---------------------------------------------------------------------------

def squash(s, axis=-1):
    """Capsule squashing: ``v = |s|^2/(1+|s|^2) * s/|s|`` with ``v(0) = 0``."""
    s = constant(s)
    sd = s.data
    sq = np.sum(sd * sd, axis=axis, keepdims=True)
    n = np.sqrt(sq)
    scale = n / (1.0 + sq)
    out = sd * scale

    def back(g):
        dot = np.sum(g * sd, axis=axis, keepdims=True)
        # d(scale)/dn / n; vanishes in the limit n -> 0 once multiplied by s
        k = np.divide((1.0 - sq) / (1.0 + sq) ** 2, n, out=np.zeros_like(n), where=n > 0)
        return (g * scale + sd * dot * k,)

    return _result(out, "squash", (s,), back)


def softmax(x, axis=-1):
    x = constant(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, "softmax", (x,), back)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _collect(root):
    seen = set()
    nodes = []
    stack_ = [root._node] if root._node is not None else []
    while stack_:
        node = stack_.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for t in node.inputs:
            if t._node is not None and id(t._node) not in seen:
                stack_.append(t._node)
    nodes.sort(key=lambda n: n.seq)
    return nodes


class Graph:
    """Recording-ordered list of the operations that produced a tensor."""

    def __init__(self, nodes):
        self.nodes = list(nodes)

    @classmethod
    def of(cls, t):
        return cls(_collect(t))

    def op_kinds(self):
        return [n.op for n in self.nodes]

    def count(self, op):
        return self.op_kinds().count(op)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients add onto whatever ``.grad`` already holds.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward needs a scalar tensor")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring gradients")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    grads = {loss._node: seed}
    leaves = {}
    for node in reversed(_collect(loss)):
        g = grads.pop(node, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = t._node if t._node is not None else t
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                if t._node is None:
                    leaves[id(t)] = t
    for t in leaves.values():
        g = np.array(grads[t], dtype=np.float64).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g
