"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_core`` extension; ``nonfat.core`` picks one at import time.
"""
import math

import numpy as np

from nonfat.errors import ConvergenceError

NAME = "python"


def laguerre_pair(n, x):
    """Return ``(L_n(x), L_{n-1}(x))`` by the three-term recurrence."""
    p1, p2 = 1.0, 0.0
    for j in range(1, n + 1):
        p3 = p2
        p2 = p1
        p1 = ((2 * j - 1 - x) * p2 - (j - 1) * p3) / j
    return p1, p2


def laguerre_rule(order, max_iter=200):
    """Nodes and weights of the order-``order`` Gauss-Laguerre rule.

    Newton iteration on the recurrence, seeded with the usual asymptotic
    guesses for the roots of ``L_n`` (ascending).
    """
    n = int(order)
    nodes = np.empty(n)
    weights = np.empty(n)
    z = 0.0
    for i in range(n):
        if i == 0:
            z = 3.0 / (1.0 + 2.4 * n)
        elif i == 1:
            z += 15.0 / (1.0 + 2.5 * n)
        else:
            ai = i - 1
            z += (1.0 + 2.55 * ai) / (1.9 * ai) * (z - nodes[i - 2])
        for _ in range(max_iter):
            p1, p2 = laguerre_pair(n, z)
            dp = n * (p1 - p2) / z
            z_old = z
            z = z_old - p1 / dp
            if abs(z - z_old) <= 3e-14 * abs(z):
                break
        else:
            raise ConvergenceError(
                f"Laguerre root {i} of order {n} did not converge", index=i
            )
        nodes[i] = z
        # gamma = x / ((n+1)^2 L_{n+1}(x)^2)
        ln, lnm1 = laguerre_pair(n, z)
        lnp1 = ((2 * n + 1 - z) * ln - n * lnm1) / (n + 1)
        weights[i] = z / ((n + 1) ** 2 * lnp1 * lnp1)
    return nodes, weights


def _diff(X, Y):
    return X[:, None, :] - Y[None, :, :]


def sq_dist(X, Y):
    d = _diff(X, Y)
    return np.einsum("ijk,ijk->ij", d, d)


def se_cross(X, Y, lengthscale):
    """``exp(-||x_i - y_j||^2 / lengthscale)`` for every row pair."""
    return np.exp(-sq_dist(X, Y) / lengthscale)


def se_cross_grad(X, Y, K, G, lengthscale):
    """Vector-Jacobian product of :func:`se_cross`.

    Returns the adjoints of ``X``, ``Y`` and of ``log(lengthscale)`` for an
    output adjoint ``G``.
    """
    W = G * K
    c = -2.0 / lengthscale
    ws_row = W.sum(axis=1)
    ws_col = W.sum(axis=0)
    dX = c * (ws_row[:, None] * X - W @ Y)
    dY = -c * (W.T @ X - ws_col[:, None] * Y)
    dlog = float(np.sum(W * sq_dist(X, Y))) / lengthscale
    return dX, dY, dlog


def gl_synth(alpha, times, nodes, weights):
    """Row-wise cosine synthesis ``(1/pi) sum_c alpha[b,c] w_c cos(x_c t_b)``."""
    basis = np.cos(np.outer(times, nodes)) * (weights / math.pi)
    return np.einsum("bc,bc->b", alpha, basis)


def gl_synth_grad(G, times, nodes, weights):
    """Adjoint of :func:`gl_synth` with respect to ``alpha``."""
    basis = np.cos(np.outer(times, nodes)) * (weights / math.pi)
    return G[:, None] * basis
