"""Gauss-Laguerre quadrature and cosine synthesis of factor trajectories.

A trajectory is represented by its frequency function sampled at the
quadrature nodes, already multiplied by ``exp(omega)`` so that the
Laguerre weight absorbs the exponential:

    u(t) ~= (1/pi) * sum_c alpha_c * gamma_c * cos(omega_c * t)
"""
from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np

from nonfat import autodiff as ad
from nonfat import core
from nonfat.errors import ConvergenceError, NumericalError

MAX_ORDER = 64
DEFAULT_ORDER = 10


@dataclass(frozen=True, eq=False)
class GLRule:
    """Nodes (ascending, positive) and weights of an order-``order`` rule."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)

    def __eq__(self, other):
        return (
            isinstance(other, GLRule)
            and self.order == other.order
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.weights, other.weights)
        )

    def __hash__(self):
        return hash(self.order)


@lru_cache(maxsize=None)
def gauss_laguerre(order: int) -> GLRule:
    """Build the Gauss-Laguerre rule for ``int_0^inf exp(-x) g(x) dx``.

    Roots of ``L_order`` come from Newton iteration on the three-term
    recurrence; weights are ``x / ((n+1)^2 L_{n+1}(x)^2)``.

    Raises ``ValueError`` for orders outside ``[1, 64]`` and
    :class:`ConvergenceError` when a root fails to converge or its Newton
    residual ``|L_n(x) / L_n'(x)|`` exceeds ``1e-10 * max(1, x)``.
    """
    order = int(order)
    if not 1 <= order <= MAX_ORDER:
        raise ValueError(f"quadrature order must be in [1, {MAX_ORDER}], got {order}")
    nodes, weights = core.laguerre_rule(order)
    for i, x in enumerate(nodes):
        ln, lnm1 = core.laguerre_pair(order, x)
        dln = order * (ln - lnm1) / x
        if not abs(ln / dln) <= 1e-10 * max(1.0, x):
            raise ConvergenceError(
                f"Laguerre root {i} of order {order} has residual {ln:.3e}", index=i
            )
    return GLRule(order, np.array(nodes, dtype=float), np.array(weights, dtype=float))


def integrate(g, rule: GLRule) -> float:
    """Approximate ``int_0^inf exp(-x) g(x) dx`` by ``sum_c w_c g(x_c)``."""
    vals = np.array([g(x) for x in rule.nodes], dtype=float)
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise NumericalError(f"integrand is not finite at node {bad} (x={rule.nodes[bad]})")
    return float(np.dot(rule.weights, vals))


def synth_trajectory(alpha, rule: GLRule, t: float) -> float:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (rule.order,):
        raise ValueError(f"alpha must have length {rule.order}, got shape {alpha.shape}")
    return float(np.sum(alpha * rule.weights * np.cos(rule.nodes * t)) / math.pi)


def synth_batch(alpha_rows, rule: GLRule, times):
    """Vectorized :func:`synth_trajectory`: row ``b`` is evaluated at ``times[b]``.

    ``alpha_rows`` may be a tape variable, in which case the result is
    differentiable with respect to it.
    """
    shape = np.shape(ad.value(alpha_rows))
    times = np.asarray(times)
    if len(shape) != 2 or shape[1] != rule.order:
        raise ValueError(f"alpha_rows must be (n, {rule.order}), got {shape}")
    if times.shape != (shape[0],):
        raise ValueError(f"times must have shape ({shape[0]},), got {times.shape}")
    if not np.all(np.isfinite(times)):
        raise ValueError("times must be finite")
    return ad.gl_synth(alpha_rows, times, rule.nodes, rule.weights)
