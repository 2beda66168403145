# cython: language_level=3
"""Compiled hot kernels; same contract as ``_core_py``."""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, cos, fabs, M_PI

from nonfat.errors import ConvergenceError

cnp.import_array()

NAME = "cython"


cdef inline void _pair(int n, double x, double* ln, double* lnm1) noexcept nogil:
    cdef double p1 = 1.0, p2 = 0.0, p3
    cdef int j
    for j in range(1, n + 1):
        p3 = p2
        p2 = p1
        p1 = ((2 * j - 1 - x) * p2 - (j - 1) * p3) / j
    ln[0] = p1
    lnm1[0] = p2


def laguerre_pair(int n, double x):
    cdef double ln, lnm1
    _pair(n, x, &ln, &lnm1)
    return ln, lnm1


def laguerre_rule(int order, int max_iter=200):
    cdef int n = order, i, it, ai
    cdef cnp.ndarray[cnp.float64_t, ndim=1] nodes = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] weights = np.empty(n)
    cdef double z = 0.0, z_old, p1, p2, dp, lnp1
    cdef bint done
    for i in range(n):
        if i == 0:
            z = 3.0 / (1.0 + 2.4 * n)
        elif i == 1:
            z += 15.0 / (1.0 + 2.5 * n)
        else:
            ai = i - 1
            z += (1.0 + 2.55 * ai) / (1.9 * ai) * (z - nodes[i - 2])
        done = False
        for it in range(max_iter):
            _pair(n, z, &p1, &p2)
            dp = n * (p1 - p2) / z
            z_old = z
            z = z_old - p1 / dp
            if fabs(z - z_old) <= 3e-14 * fabs(z):
                done = True
                break
        if not done:
            raise ConvergenceError(
                f"Laguerre root {i} of order {n} did not converge", index=i
            )
        nodes[i] = z
        _pair(n, z, &p1, &p2)
        lnp1 = ((2 * n + 1 - z) * p1 - n * p2) / (n + 1)
        weights[i] = z / ((n + 1.0) * (n + 1.0) * lnp1 * lnp1)
    return nodes, weights


def sq_dist(const floating[:, ::1] X, const floating[:, ::1] Y):
    cdef Py_ssize_t n = X.shape[0], m = Y.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, q
    cdef double acc, diff
    dtype = np.float64 if floating is double else np.float32
    out = np.empty((n, m), dtype=dtype)
    cdef floating[:, ::1] D = out
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for q in range(d):
                    diff = X[i, q] - Y[j, q]
                    acc = acc + diff * diff
                D[i, j] = acc
    return out


def se_cross(const floating[:, ::1] X, const floating[:, ::1] Y, double lengthscale):
    cdef Py_ssize_t n = X.shape[0], m = Y.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, q
    cdef double acc, diff, inv = 1.0 / lengthscale
    dtype = np.float64 if floating is double else np.float32
    out = np.empty((n, m), dtype=dtype)
    cdef floating[:, ::1] K = out
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for q in range(d):
                    diff = X[i, q] - Y[j, q]
                    acc = acc + diff * diff
                K[i, j] = exp(-acc * inv)
    return out


def se_cross_grad(const floating[:, ::1] X, const floating[:, ::1] Y,
                  const floating[:, ::1] K, const floating[:, ::1] G, double lengthscale):
    cdef Py_ssize_t n = X.shape[0], m = Y.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, q
    cdef double w, diff, acc, dlog = 0.0
    cdef double c = -2.0 / lengthscale
    dtype = np.float64 if floating is double else np.float32
    dX_arr = np.zeros((n, d), dtype=dtype)
    dY_arr = np.zeros((m, d), dtype=dtype)
    cdef floating[:, ::1] dX = dX_arr
    cdef floating[:, ::1] dY = dY_arr
    with nogil:
        for i in range(n):
            for j in range(m):
                w = G[i, j] * K[i, j]
                if w == 0.0:
                    continue
                acc = 0.0
                for q in range(d):
                    diff = X[i, q] - Y[j, q]
                    acc = acc + diff * diff
                    dX[i, q] += c * w * diff
                    dY[j, q] -= c * w * diff
                dlog += w * acc
    return dX_arr, dY_arr, dlog / lengthscale


def gl_synth(const floating[:, ::1] alpha, const floating[::1] times,
             const double[::1] nodes, const double[::1] weights):
    cdef Py_ssize_t b = alpha.shape[0], C = alpha.shape[1], i, c
    cdef double acc, t
    dtype = np.float64 if floating is double else np.float32
    out = np.empty(b, dtype=dtype)
    cdef floating[::1] u = out
    with nogil:
        for i in range(b):
            t = times[i]
            acc = 0.0
            for c in range(C):
                acc = acc + alpha[i, c] * weights[c] * cos(nodes[c] * t)
            u[i] = acc / M_PI
    return out


def gl_synth_grad(const floating[::1] G, const floating[::1] times,
                  const double[::1] nodes, const double[::1] weights):
    cdef Py_ssize_t b = G.shape[0], C = nodes.shape[0], i, c
    cdef double t, g
    dtype = np.float64 if floating is double else np.float32
    out = np.empty((b, C), dtype=dtype)
    cdef floating[:, ::1] dA = out
    with nogil:
        for i in range(b):
            t = times[i]
            g = G[i] / M_PI
            for c in range(C):
                dA[i, c] = g * weights[c] * cos(nodes[c] * t)
    return out
