"""A small reverse-mode automatic differentiation tape over numpy arrays.

Every operation accepts plain arrays or :class:`Var` nodes. When no input
is a ``Var`` the operation returns a plain array and records nothing, so the
same model code serves both the differentiable training path and the
cheap prediction path.

Each recorded node keeps its inputs and a closure that maps the output
adjoint to one adjoint per input (``None`` for inputs that are not ``Var``).
"""
import math

import numpy as np
from scipy.linalg import solve_triangular

from nonfat import core


class Var:
    """A node of the computation graph holding an array value."""

    __slots__ = ("value", "inputs", "vjp", "grad", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, inputs=(), vjp=None, name=None):
        self.value = value
        self.inputs = inputs
        self.vjp = vjp
        self.grad = None
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={np.shape(self.value)})"

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def dtype(self):
        return np.asarray(self.value).dtype

    @property
    def T(self):
        return transpose(self)

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __len__(self):
        return len(self.value)

    def backward(self, seed=None):
        """Accumulate ``d self / d leaf`` into ``leaf.grad`` for every leaf."""
        order = toposort(self)
        if seed is None:
            seed = np.ones_like(np.asarray(self.value, dtype=float))
        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not isinstance(inp, Var):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def toposort(root):
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if isinstance(inp, Var) and id(inp) not in seen:
                stack.append((inp, False))
    return order


def value(x):
    return x.value if isinstance(x, Var) else x


def is_var(x):
    return isinstance(x, Var)


def _record(out, inputs, vjp):
    if any(isinstance(x, Var) for x in inputs):
        return Var(out, tuple(inputs), vjp)
    return out


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        av + bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        av - bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        av * bv,
        (a, b),
        lambda g: (
            _unbroadcast(g * bv, sa) if is_var(a) else None,
            _unbroadcast(g * av, sb) if is_var(b) else None,
        ),
    )


def div(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, sa) if is_var(a) else None,
            _unbroadcast(-g * out / bv, sb) if is_var(b) else None,
        ),
    )


def neg(a):
    return _record(-value(a), (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(value(a))
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    av = value(a)
    return _record(np.log(av), (a,), lambda g: (g / av,))


def cos(a):
    av = value(a)
    return _record(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def square(a):
    av = value(a)
    return _record(av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a):
    """Square root whose adjoint is zero where the value is zero."""
    out = np.sqrt(value(a))

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _record(out, (a,), vjp)


def clamp_min(a, floor=0.0):
    av = value(a)
    keep = av > floor
    return _record(np.where(keep, av, floor), (a,), lambda g: (g * keep,))


# -- shape manipulation -----------------------------------------------------


def transpose(a):
    return _record(np.transpose(value(a)), (a,), lambda g: (np.transpose(g),))


def reshape(a, shape):
    av = value(a)
    old = np.shape(av)
    return _record(np.reshape(av, shape), (a,), lambda g: (np.reshape(g, old),))


def getitem(a, key):
    av = value(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, key, g)
        return (out,)

    return _record(av[key], (a,), vjp)


def stack(items, axis=0):
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _record(out, tuple(items), vjp)


def concatenate(items, axis=0):
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([np.shape(v)[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(items), vjp)


def diagonal(a):
    av = value(a)
    return _record(np.diagonal(av).copy(), (a,), lambda g: (np.diag(g),))


# -- reductions and products ------------------------------------------------


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    av = value(a)
    shape = np.shape(av)

    def vjp(g):
        if axis is None:
            return (np.full(shape, g, dtype=np.result_type(av, float)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.sum(av, axis=axis), (a,), vjp)


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv

    def vjp(g):
        ga = gb = None
        if av.ndim == 2 and bv.ndim == 2:
            if is_var(a):
                ga = g @ bv.T
            if is_var(b):
                gb = av.T @ g
        elif av.ndim == 2 and bv.ndim == 1:
            if is_var(a):
                ga = np.outer(g, bv)
            if is_var(b):
                gb = av.T @ g
        elif av.ndim == 1 and bv.ndim == 2:
            if is_var(a):
                ga = bv @ g
            if is_var(b):
                gb = np.outer(av, g)
        else:
            ga = g * bv if is_var(a) else None
            gb = g * av if is_var(b) else None
        return ga, gb

    return _record(out, (a, b), vjp)


# -- linear algebra ---------------------------------------------------------


def tril_param(raw):
    """Lower-triangular factor with a positive diagonal from a raw square matrix.

    The strict lower triangle is taken as is and the diagonal as
    ``exp(diag(raw))``; the upper triangle of ``raw`` is ignored.
    """
    rv = value(raw)
    d = np.exp(np.diagonal(rv))
    out = np.tril(rv, -1) + np.diag(d)

    def vjp(g):
        return (np.tril(g, -1) + np.diag(np.diagonal(g) * d),)

    return _record(out, (raw,), vjp)


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    L = np.linalg.cholesky(value(a))

    def vjp(g):
        P = L.T @ np.tril(g)
        P = np.tril(P) - 0.5 * np.diag(np.diagonal(P))
        M = solve_triangular(L, P.T, lower=True, trans="T").T
        S = solve_triangular(L, M, lower=True, trans="T")
        # S = L^{-T} P L^{-1}; the input is symmetric, so split evenly
        return (0.5 * (S + S.T),)

    return _record(L, (a,), vjp)


def solve_tri(L, B, trans=False):
    """Solve ``L X = B`` (or ``L^T X = B`` when ``trans``) for lower ``L``."""
    Lv, Bv = value(L), value(B)
    X = solve_triangular(Lv, Bv, lower=True, trans="T" if trans else "N")

    def vjp(g):
        gB = solve_triangular(Lv, g, lower=True, trans="N" if trans else "T")
        gL = None
        if is_var(L):
            Xm = X if X.ndim == 2 else X[:, None]
            Gm = gB if gB.ndim == 2 else gB[:, None]
            gL = -np.tril(Xm @ Gm.T) if trans else -np.tril(Gm @ Xm.T)
        return gL, (gB if is_var(B) else None)

    return _record(X, (L, B), vjp)


# -- fused model kernels ----------------------------------------------------


def se_cross(X, Y, log_lengthscale):
    """Square-exponential cross kernel ``exp(-||x - y||^2 / exp(log_ls))``."""
    Xv, Yv, lv = value(X), value(Y), value(log_lengthscale)
    ls = math.exp(float(lv))
    K = core.se_cross(Xv, Yv, ls)

    def vjp(g):
        dX, dY, dlog = core.se_cross_grad(Xv, Yv, K, g, ls)
        return dX, dY, np.asarray(dlog).reshape(np.shape(lv))

    return _record(K, (X, Y, log_lengthscale), vjp)


def gl_synth(alpha, times, nodes, weights):
    """Cosine synthesis per row; ``times`` are treated as constants."""
    av = value(alpha)
    u = core.gl_synth(av, times, nodes, weights)

    def vjp(g):
        return (core.gl_synth_grad(g, times, nodes, weights),)

    return _record(u, (alpha,), vjp)


# -- drivers ----------------------------------------------------------------


def value_and_grad(fn, params, *args, **kwargs):
    """Evaluate ``fn(vars, *args)`` and its gradient w.r.t. each entry of ``params``.

    ``params`` maps names to arrays; the returned gradient dict has the same
    keys, with zeros for parameters the output does not depend on.
    """
    leaves = {name: Var(np.asarray(arr), name=name) for name, arr in params.items()}
    out = fn(leaves, *args, **kwargs)
    if not isinstance(out, Var):
        return float(out), {k: np.zeros_like(v) for k, v in params.items()}
    out.backward()
    grads = {}
    for name, leaf in leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return float(out.value), grads
