"""Square-exponential kernels and jittered Cholesky factorization."""
from dataclasses import dataclass
import math

import numpy as np

from nonfat import autodiff as ad
from nonfat.errors import NotPositiveDefiniteError

DEFAULT_JITTER = 1e-6
MAX_JITTER_TRIES = 6


@dataclass
class SEKernel:
    """``k(x, y) = exp(-||x - y||^2 / eta)`` with ``eta = exp(log_lengthscale)``.

    ``log_lengthscale`` may be a tape variable during training.
    """

    log_lengthscale: object = 0.0

    @property
    def lengthscale(self):
        return math.exp(float(ad.value(self.log_lengthscale)))

    def __call__(self, x, y):
        return k(self, x, y)


@dataclass
class ProductKernel:
    """Separable kernel over ``[embedding; frequency]`` pairs."""

    embed: SEKernel
    freq: SEKernel

    def __call__(self, e, w, e2, w2):
        return k(self.embed, e, e2) * k(self.freq, np.atleast_1d(w), np.atleast_1d(w2))


def _as_rows(X):
    v = np.asarray(ad.value(X))
    if v.ndim == 1:
        return ad.reshape(X, (-1, 1)) if ad.is_var(X) else v.reshape(-1, 1)
    if v.ndim != 2:
        raise ValueError(f"expected a matrix of inputs, got shape {v.shape}")
    return X


def k(kernel: SEKernel, x, y) -> float:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    y = np.asarray(y, dtype=float).reshape(1, -1)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    return float(np.exp(-np.sum((x - y) ** 2) / kernel.lengthscale))


def cross(kernel: SEKernel, X, Y):
    """Cross-covariance matrix ``[k(x_i, y_j)]``; differentiable on the tape."""
    X, Y = _as_rows(X), _as_rows(Y)
    dx, dy = np.shape(ad.value(X))[1], np.shape(ad.value(Y))[1]
    if dx != dy:
        raise ValueError(f"dimension mismatch: {dx} vs {dy}")
    return ad.se_cross(X, Y, kernel.log_lengthscale)


def gram(kernel: SEKernel, X):
    return cross(kernel, X, X)


def chol_jitter(M, base_jitter=DEFAULT_JITTER, max_tries=MAX_JITTER_TRIES):
    """Cholesky factor of ``M + j I`` with escalating jitter.

    The first attempt uses ``base_jitter``; each failure multiplies the jitter
    by ten (a zero base starts escalating from ``1e-10`` times the mean
    diagonal). Returns ``(L, j)``; ``L`` is a tape variable when ``M`` is.
    """
    Mv = np.asarray(ad.value(M))
    n = Mv.shape[0]
    if Mv.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {Mv.shape}")
    if not np.all(np.isfinite(Mv)):
        raise NotPositiveDefiniteError("matrix has non-finite entries")
    eye = np.eye(n, dtype=Mv.dtype)
    jitter = float(base_jitter)
    for attempt in range(max_tries):
        try:
            return ad.cholesky(M + jitter * eye), jitter
        except np.linalg.LinAlgError:
            if attempt == max_tries - 1:
                break
            if jitter > 0:
                jitter *= 10.0
            else:
                jitter = 1e-10 * max(float(np.mean(np.abs(np.diagonal(Mv)))), 1e-300)
    raise NotPositiveDefiniteError(
        f"matrix is not positive definite after {max_tries} jitter attempts "
        f"(last jitter {jitter:.1e})",
        jitter=jitter,
    )
