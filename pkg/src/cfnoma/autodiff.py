"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every operation in creation order, which is a
topological order, so the backward pass is a single reverse sweep.
Complex quantities are carried as (real, imag) pairs of real tensors.

Second-order products (Hessian-vector, mixed second derivatives) are
central finite differences of first-order gradients; see :func:`hvp` and
:func:`mixed_vjp`.
"""
from __future__ import annotations

import logging
import math
import numpy as np

_logger = logging.getLogger(__name__)


class Tape:
    """Append-only record of the computation."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite

    def variable(self, value, name=None) -> "Tensor":
        return Tensor(np.array(value, dtype=np.float64), self, (), "leaf", name=name)

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ("value", "tape", "index", "parents", "op", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, tape, parents, op, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents  # tuple of (Tensor, vjp) pairs
        self.op = op
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    return None


def _node(value, parents, op):
    """Record a node; ``parents`` lists (input, vjp) with constants skipped."""
    tape = _tape_of(*(p for p, _ in parents))
    if tape is None:  # all inputs constant
        return np.asarray(value, dtype=np.float64)
    parents = tuple((p, f) for p, f in parents if isinstance(p, Tensor))
    value = np.asarray(value, dtype=np.float64)
    if tape.check_finite and not np.all(np.isfinite(value)):
        if all(np.all(np.isfinite(p.value)) for p, _ in parents):
            raise FloatingPointError(f"non-finite value produced by op '{op}'")
    return Tensor(value, tape, parents, op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise binary ---------------------------------------------------------

def add(a, b):
    av, bv = _val(a), _val(b)
    if _tape_of(a, b) is None:
        return av + bv
    return _node(av + bv, [(a, lambda g: _unbroadcast(g, av.shape)),
                           (b, lambda g: _unbroadcast(g, bv.shape))], "add")


def sub(a, b):
    av, bv = _val(a), _val(b)
    if _tape_of(a, b) is None:
        return av - bv
    return _node(av - bv, [(a, lambda g: _unbroadcast(g, av.shape)),
                           (b, lambda g: _unbroadcast(-g, bv.shape))], "sub")


def mul(a, b):
    av, bv = _val(a), _val(b)
    if _tape_of(a, b) is None:
        return av * bv
    return _node(av * bv, [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                           (b, lambda g: _unbroadcast(g * av, bv.shape))], "mul")


def div(a, b):
    av, bv = _val(a), _val(b)
    if _tape_of(a, b) is None:
        return av / bv
    out = av / bv
    return _node(out, [(a, lambda g: _unbroadcast(g / bv, av.shape)),
                       (b, lambda g: _unbroadcast(-g * out / bv, bv.shape))], "div")


def neg(a):
    return _node(-_val(a), [(a, lambda g: -g)], "neg")


def power(a, p: float):
    av = _val(a)
    return _node(av ** p, [(a, lambda g: g * p * av ** (p - 1))], "pow")


def minimum(a, b):
    """Elementwise min; the gradient goes to ``a`` on ties."""
    av, bv = _val(a), _val(b)
    pick = av <= bv
    if _tape_of(a, b) is None:
        return np.where(pick, av, bv)
    out = np.where(pick, av, bv)
    return _node(out, [(a, lambda g: _unbroadcast(np.where(pick, g, 0.0), av.shape)),
                       (b, lambda g: _unbroadcast(np.where(pick, 0.0, g), bv.shape))], "minimum")


def maximum(a, b):
    """Elementwise max; the gradient goes to ``a`` on ties."""
    av, bv = _val(a), _val(b)
    pick = av >= bv
    if _tape_of(a, b) is None:
        return np.where(pick, av, bv)
    out = np.where(pick, av, bv)
    return _node(out, [(a, lambda g: _unbroadcast(np.where(pick, g, 0.0), av.shape)),
                       (b, lambda g: _unbroadcast(np.where(pick, 0.0, g), bv.shape))], "maximum")


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    av, bv = _val(a), _val(b)
    out = np.where(cond, av, bv)
    if _tape_of(a, b) is None:
        return out
    return _node(out, [(a, lambda g: _unbroadcast(np.where(cond, g, 0.0), av.shape)),
                       (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), bv.shape))], "where")


# elementwise unary ----------------------------------------------------------

def exp(a):
    out = np.exp(_val(a))
    return _node(out, [(a, lambda g: g * out)], "exp")


def log(a):
    av = _val(a)
    return _node(np.log(av), [(a, lambda g: g / av)], "log")


def log2(a):
    av = _val(a)
    return _node(np.log2(av), [(a, lambda g: g / (av * math.log(2.0)))], "log2")


def sqrt(a):
    out = np.sqrt(_val(a))
    return _node(out, [(a, lambda g: g * 0.5 / out)], "sqrt")


def tanh(a):
    out = np.tanh(_val(a))
    return _node(out, [(a, lambda g: g * (1.0 - out * out))], "tanh")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    if not isinstance(a, Tensor):
        return _sigmoid(np.asarray(a, dtype=np.float64))
    out = _sigmoid(_val(a))
    return _node(out, [(a, lambda g: g * out * (1.0 - out))], "sigmoid")


def relu(a):
    mask = _val(a) > 0
    return _node(np.where(mask, _val(a), 0.0), [(a, lambda g: g * mask)], "relu")


def softplus(a):
    av = _val(a)
    out = np.logaddexp(0.0, av)
    return _node(out, [(a, lambda g: g * _sigmoid(av))], "softplus")


def cabs2(re, im):
    """``|z|^2`` for ``z = re + j im``."""
    rv, iv = _val(re), _val(im)
    if _tape_of(re, im) is None:
        return rv * rv + iv * iv
    return _node(rv * rv + iv * iv, [(re, lambda g: _unbroadcast(2.0 * g * rv, rv.shape)),
                                     (im, lambda g: _unbroadcast(2.0 * g * iv, iv.shape))], "cabs2")


# reductions -----------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    shape = _val(a).shape
    return _node(_val(a).sum(axis=axis, keepdims=keepdims),
                 [(a, lambda g: _expand(g, shape, axis, keepdims).copy())], "sum")


def mean(a, axis=None, keepdims=False):
    shape = _val(a).shape
    n = _val(a).size if axis is None else int(np.prod([shape[x] for x in np.atleast_1d(axis)]))
    return _node(_val(a).mean(axis=axis, keepdims=keepdims),
                 [(a, lambda g: _expand(g, shape, axis, keepdims) / n)], "mean")


def _select_reduce(a, axis, fn, op):
    av = _val(a)
    idx = fn(av, axis=axis)
    out = np.take_along_axis(av, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return full

    t = _node(out, [(a, vjp)], op)
    return t, idx


def min_argmin(a, axis: int):
    """Min along ``axis`` with the subgradient on the first minimizer."""
    return _select_reduce(a, axis, np.argmin, "min")


def tmin(a, axis: int):
    return min_argmin(a, axis)[0]


def tmax(a, axis: int):
    return _select_reduce(a, axis, np.argmax, "max")[0]


def logsumexp(a, axis: int):
    av = _val(a)
    mx = av.max(axis=axis, keepdims=True)
    ex = np.exp(av - mx)
    s = ex.sum(axis=axis, keepdims=True)
    out = (np.log(s) + mx).squeeze(axis)
    p = ex / s
    return _node(out, [(a, lambda g: np.expand_dims(g, axis) * p)], "logsumexp")


def softmax(a, axis: int = -1):
    av = _val(a)
    ex = np.exp(av - av.max(axis=axis, keepdims=True))
    out = ex / ex.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _node(out, [(a, vjp)], "softmax")


# shape ops ------------------------------------------------------------------

def reshape(a, shape):
    old = _val(a).shape
    return _node(_val(a).reshape(shape), [(a, lambda g: g.reshape(old))], "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(_val(a).ndim)))
    inv = np.argsort(axes)
    return _node(np.transpose(_val(a), axes), [(a, lambda g: np.transpose(g, inv))], "transpose")


def swapaxes(a, i, j):
    axes = list(range(_val(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, idx):
    av = _val(a)

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return full

    return _node(av[idx], [(a, vjp)], "getitem")


def concatenate(xs, axis=0):
    vals = [_val(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    parents = []
    for j, x in enumerate(xs):
        def vjp(g, j=j):
            return np.split(g, sizes, axis=axis)[j]
        parents.append((x, vjp))
    out = np.concatenate(vals, axis=axis)
    if _tape_of(*xs) is None:
        return out
    return _node(out, parents, "concatenate")


def stack(xs, axis=0):
    return concatenate([expand_dims(x, axis) if isinstance(x, Tensor) else np.expand_dims(_val(x), axis)
                        for x in xs], axis=axis)


def expand_dims(a, axis):
    return reshape(a, np.expand_dims(_val(a), axis).shape)


def broadcast_to(a, shape):
    old = _val(a).shape
    return _node(np.broadcast_to(_val(a), shape).copy(),
                 [(a, lambda g: _unbroadcast(g, old))], "broadcast")


# linear algebra -------------------------------------------------------------

def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")
    if _tape_of(a, b) is None:
        return av @ bv
    return _node(av @ bv, [
        (a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)),
        (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)),
    ], "matmul")


def einsum(subscripts: str, *operands):
    """Einsum with explicit output; no repeated index inside one operand."""
    if "->" not in subscripts or "." in subscripts:
        raise ValueError("einsum needs explicit '->' output and no ellipsis")
    ins, out_s = subscripts.replace(" ", "").split("->")
    in_subs = ins.split(",")
    vals = [_val(x) for x in operands]
    out = np.einsum(subscripts, *vals, optimize=len(vals) > 2)
    if _tape_of(*operands) is None:
        return out
    parents = []
    for j, x in enumerate(operands):
        if not isinstance(x, Tensor):
            continue

        def vjp(g, j=j):
            others = [in_subs[i] for i in range(len(vals)) if i != j]
            avail = set(out_s).union(*others) if others else set(out_s)
            target = in_subs[j]
            red = "".join(c for c in target if c in avail)
            expr = ",".join([out_s] + others) + "->" + red
            gj = np.einsum(expr, g, *[vals[i] for i in range(len(vals)) if i != j],
                           optimize=len(vals) > 2)
            if red != target:
                shape = [vals[j].shape[target.index(c)] if c in red else 1 for c in target]
                # reorder reduced result to target order, then broadcast
                perm_src = "".join(c for c in target if c in red)
                gj = np.einsum(red + "->" + perm_src, gj).reshape(shape)
                gj = np.broadcast_to(gj, vals[j].shape).copy()
            return gj

        parents.append((x, vjp))
    return _node(out, parents, "einsum")


# gradients ------------------------------------------------------------------

def backward(loss: Tensor) -> dict:
    """Gradients of a scalar ``loss`` keyed by node index."""
    if loss.value.size != 1:
        raise ValueError("loss must be scalar")
    tape = loss.tape
    grads = {loss.index: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if not node.parents:
            grads[node.index] = g  # keep leaf grads
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + contrib
            else:
                grads[parent.index] = contrib
    return grads


def gradient(loss: Tensor, params) -> np.ndarray:
    """Flat gradient of ``loss`` w.r.t. the leaf tensors ``params`` (in order)."""
    params = list(params.values()) if isinstance(params, dict) else list(params)
    grads = backward(loss)
    parts = []
    missing = []
    for p in params:
        g = grads.get(p.index)
        if g is None:
            missing.append(p.name or p.index)
            g = np.zeros_like(p.value)
        parts.append(np.asarray(g, dtype=np.float64).ravel())
    if missing:
        _logger.debug("parameters not connected to loss: %s", missing)
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


class ParamVector:
    """Named tensors viewed as one flat float64 vector."""

    def __init__(self, arrays: dict):
        self.names = list(arrays)
        self.shapes = {k: np.shape(arrays[k]) for k in self.names}
        self.arrays = {k: np.array(arrays[k], dtype=np.float64) for k in self.names}

    @property
    def size(self):
        return sum(int(np.prod(s)) for s in self.shapes.values())

    def __len__(self):
        return self.size

    def __getitem__(self, name):
        return self.arrays[name]

    def flatten(self) -> np.ndarray:
        if not self.names:
            return np.zeros(0)
        return np.concatenate([self.arrays[k].ravel() for k in self.names])

    def unflatten(self, flat) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ValueError(f"expected {self.size} values, got {flat.size}")
        out, pos = {}, 0
        for k in self.names:
            n = int(np.prod(self.shapes[k]))
            out[k] = flat[pos:pos + n].reshape(self.shapes[k])
            pos += n
        return ParamVector(out)

    def attach(self, tape: Tape) -> dict:
        return {k: tape.variable(self.arrays[k], name=k) for k in self.names}

    def to_json(self) -> dict:
        return {k: {"shape": list(self.shapes[k]), "data": self.arrays[k].ravel().tolist()}
                for k in self.names}

    @classmethod
    def from_json(cls, d: dict) -> "ParamVector":
        return cls({k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()})


# finite-difference second-order products -----------------------------------

def _fd_step(theta, eps):
    if eps is None:
        eps = 1e-4 * (1.0 + float(np.linalg.norm(theta)))
    if not eps > 1e-12:
        raise ValueError(f"finite-difference step {eps!r} too small")
    return eps


def hvp(grad_fn, theta, v, eps=None) -> np.ndarray:
    """Hessian-vector product ``(g(theta + e u) - g(theta - e u)) / 2e * |v|``, ``u = v/|v|``."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return np.zeros_like(theta)
    eps = _fd_step(theta, eps)
    u = v / nv
    gp = grad_fn(theta + eps * u)
    gm = grad_fn(theta - eps * u)
    return (gp - gm) * (nv / (2.0 * eps))


def mixed_vjp(grad_alpha_fn, theta, alpha, v, eps=None) -> np.ndarray:
    """``v^T d2L/(dtheta dalpha)`` as a central difference of ``grad_alpha`` along ``v``."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return np.zeros_like(np.asarray(alpha, dtype=np.float64))
    eps = _fd_step(theta, eps)
    u = v / nv
    gp = grad_alpha_fn(theta + eps * u, alpha)
    gm = grad_alpha_fn(theta - eps * u, alpha)
    return (gp - gm) * (nv / (2.0 * eps))


def numeric_gradient(f, x, h=1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` (test and debugging aid)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        gf[i] = (f((flat + e).reshape(x.shape)) - f((flat - e).reshape(x.shape))) / (2 * h)
    return g


__all__ = [n for n in dir() if not n.startswith("_") and n not in ("annotations",)]
