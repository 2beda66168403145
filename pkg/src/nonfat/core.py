"""Backend selection for the hot kernels.

The compiled extension is used when it imports; setting the environment
variable ``NONFAT_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

import numpy as np

from nonfat import _core_py


def _load_compiled():
    if os.environ.get("NONFAT_PURE_PYTHON"):
        return None
    try:
        from nonfat import _core
    except ImportError:
        return None
    return _core


_compiled = _load_compiled()
_impl = _compiled if _compiled is not None else _core_py

BACKEND = _impl.NAME


def available_backends():
    names = ["python"]
    if _compiled is not None:
        names.append("cython")
    return names


def get_backend(name=None):
    """Return the kernel module called ``name`` (default: the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _core_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled core is not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def _c(a):
    a = np.asarray(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return np.ascontiguousarray(a)


def _same(X, Y):
    if X.dtype != Y.dtype:
        dt = np.result_type(X, Y)
        return X.astype(dt), Y.astype(dt)
    return X, Y


def laguerre_pair(n, x):
    return _impl.laguerre_pair(int(n), float(x))


def laguerre_rule(order):
    return _impl.laguerre_rule(int(order))


def sq_dist(X, Y):
    X, Y = _same(_c(X), _c(Y))
    return _impl.sq_dist(X, Y)


def se_cross(X, Y, lengthscale):
    X, Y = _same(_c(X), _c(Y))
    return _impl.se_cross(X, Y, float(lengthscale))


def se_cross_grad(X, Y, K, G, lengthscale):
    X, Y = _same(_c(X), _c(Y))
    K = _c(K).astype(X.dtype, copy=False)
    G = _c(G).astype(X.dtype, copy=False)
    return _impl.se_cross_grad(X, Y, K, G, float(lengthscale))


def gl_synth(alpha, times, nodes, weights):
    alpha = _c(alpha)
    times = _c(times).astype(alpha.dtype, copy=False)
    return _impl.gl_synth(
        alpha, times, _c(nodes).astype(np.float64), _c(weights).astype(np.float64)
    )


def gl_synth_grad(G, times, nodes, weights):
    G = _c(G)
    times = _c(times).astype(G.dtype, copy=False)
    return _impl.gl_synth_grad(
        G, times, _c(nodes).astype(np.float64), _c(weights).astype(np.float64)
    )
