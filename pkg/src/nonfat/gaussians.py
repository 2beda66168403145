"""Matrix-Gaussian and Gaussian building blocks for the variational posterior.

All functions accept plain arrays or tape variables. Sampling is written
in reparameterized form: randomness enters only through explicit standard
normal ``noise`` arguments.
"""
from dataclasses import dataclass
import math

import numpy as np
from scipy.linalg import solve_triangular

from nonfat import autodiff as ad
from nonfat.kernels import DEFAULT_JITTER, ProductKernel, SEKernel, chol_jitter, cross, gram

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MatrixGaussian:
    """``MN(mean, row_chol row_chol^T, col_chol col_chol^T)``.

    ``vec(X)`` (column stacking) is Gaussian with covariance
    ``(col_chol col_chol^T) kron (row_chol row_chol^T)``.
    """

    mean: object
    row_chol: object
    col_chol: object

    @property
    def shape(self):
        return np.shape(ad.value(self.mean))

    def row_cov(self):
        L = np.asarray(ad.value(self.row_chol))
        return L @ L.T

    def col_cov(self):
        R = np.asarray(ad.value(self.col_chol))
        return R @ R.T


@dataclass
class GaussianPosterior:
    """``N(mean, chol chol^T)`` with a full lower-triangular factor."""

    mean: object
    chol: object

    @property
    def size(self):
        return np.shape(ad.value(self.mean))[0]


def _check_mg(d: MatrixGaussian):
    n, m = d.shape
    if np.shape(ad.value(d.row_chol)) != (n, n) or np.shape(ad.value(d.col_chol)) != (m, m):
        raise ValueError(
            f"factor shapes {np.shape(ad.value(d.row_chol))}, "
            f"{np.shape(ad.value(d.col_chol))} do not match mean {d.shape}"
        )
    return n, m


def _sumsq(x):
    return ad.sum(ad.square(x))


def _logdet_from_chol(L):
    """``log|L L^T|`` for a triangular factor of either diagonal sign."""
    return ad.sum(ad.log(ad.square(ad.diagonal(L))))


def mg_logpdf(X, d: MatrixGaussian):
    """Log-density of ``X``; a plain ``(S, n, m)`` stack gives ``S`` values."""
    n, m = _check_mg(d)
    if np.ndim(ad.value(X)) == 3 and not ad.is_var(X):
        return _mg_logpdf_stack(np.asarray(X), d)
    if np.shape(ad.value(X)) != (n, m):
        raise ValueError(f"X has shape {np.shape(ad.value(X))}, expected {(n, m)}")
    Y = ad.solve_tri(d.row_chol, X - d.mean)
    W = ad.solve_tri(d.col_chol, ad.transpose(Y))
    return (
        -0.5 * _sumsq(W)
        - 0.5 * n * m * LOG_2PI
        - 0.5 * m * _logdet_from_chol(d.row_chol)
        - 0.5 * n * _logdet_from_chol(d.col_chol)
    )


def _mg_logpdf_stack(X, d):
    n, m = d.shape
    L, R = np.asarray(ad.value(d.row_chol)), np.asarray(ad.value(d.col_chol))
    Linv = solve_triangular(L, np.eye(n), lower=True)
    Rinv = solve_triangular(R, np.eye(m), lower=True)
    W = Linv @ (X - np.asarray(ad.value(d.mean))) @ Rinv.T
    logdet_r = np.sum(np.log(np.diagonal(L) ** 2))
    logdet_c = np.sum(np.log(np.diagonal(R) ** 2))
    return (
        -0.5 * np.sum(W * W, axis=(1, 2))
        - 0.5 * n * m * LOG_2PI
        - 0.5 * m * logdet_r
        - 0.5 * n * logdet_c
    )


def mg_sample(d: MatrixGaussian, noise):
    """Reparameterized draw ``mean + row_chol @ noise @ col_chol^T``.

    A plain ``(S, n, m)`` noise stack yields ``S`` draws.
    """
    _check_mg(d)
    if np.ndim(noise) == 3 and not any(
        ad.is_var(x) for x in (d.mean, d.row_chol, d.col_chol)
    ):
        if np.shape(noise)[1:] != d.shape:
            raise ValueError(f"noise has shape {np.shape(noise)}, expected (S, *{d.shape})")
        return d.mean + d.row_chol @ noise @ np.transpose(d.col_chol)
    if np.shape(noise) != d.shape:
        raise ValueError(f"noise has shape {np.shape(noise)}, expected {d.shape}")
    return d.mean + d.row_chol @ ad.matmul(noise, ad.transpose(d.col_chol))


def kl_mg_chol(q: MatrixGaussian, prior_row_chol, prior_col_chol):
    """``KL(q || MN(0, Kr, Kc))`` given Cholesky factors of ``Kr`` and ``Kc``.

    Uses the Kronecker identities so nothing larger than ``n x n`` or
    ``m x m`` is formed.
    """
    n, m = _check_mg(q)
    tr_row = _sumsq(ad.solve_tri(prior_row_chol, q.row_chol))
    tr_col = _sumsq(ad.solve_tri(prior_col_chol, q.col_chol))
    B = ad.solve_tri(prior_row_chol, q.mean)
    mahal = _sumsq(ad.solve_tri(prior_col_chol, ad.transpose(B)))
    return 0.5 * (
        tr_row * tr_col
        + mahal
        - n * m
        + m * _logdet_from_chol(prior_row_chol)
        + n * _logdet_from_chol(prior_col_chol)
        - m * _logdet_from_chol(q.row_chol)
        - n * _logdet_from_chol(q.col_chol)
    )


def kl_mg_prior(q: MatrixGaussian, prior_row, prior_col, jitter=DEFAULT_JITTER):
    Lr, _ = chol_jitter(prior_row, jitter)
    Lc, _ = chol_jitter(prior_col, jitter)
    return kl_mg_chol(q, Lr, Lc)


def kl_gaussian_chol(q: GaussianPosterior, prior_chol):
    """``KL(q || N(0, P P^T))`` for a lower-triangular prior factor ``P``."""
    a = q.size
    if np.shape(ad.value(prior_chol)) != (a, a):
        raise ValueError(f"prior factor shape {np.shape(ad.value(prior_chol))} != {(a, a)}")
    trace = _sumsq(ad.solve_tri(prior_chol, q.chol))
    mahal = _sumsq(ad.solve_tri(prior_chol, q.mean))
    return 0.5 * (
        trace + mahal - a + _logdet_from_chol(prior_chol) - _logdet_from_chol(q.chol)
    )


def kl_gaussian(q: GaussianPosterior, prior_cov, jitter=DEFAULT_JITTER):
    P, _ = chol_jitter(prior_cov, jitter)
    return kl_gaussian_chol(q, P)


# -- conditionals given pseudo outputs ---------------------------------------


def cond_moments(X, Z, outputs, kernel: SEKernel, Kzz_chol):
    """Conditional mean and variance of a unit-amplitude GP at the rows of ``X``.

    ``outputs`` holds the pseudo outputs at ``Z`` (vector or matrix whose
    rows align with ``Z``). Returns ``(mean, var)`` where
    ``mean = k(X, Z) Kzz^{-1} outputs`` and
    ``var = 1 - diag(k(X, Z) Kzz^{-1} k(Z, X))``, clamped at zero.
    """
    Kxz = cross(kernel, X, Z)
    W = ad.solve_tri(Kzz_chol, ad.transpose(Kxz))
    V = ad.solve_tri(Kzz_chol, outputs)
    mean = ad.matmul(ad.transpose(W), V)
    var = ad.clamp_min(1.0 - ad.sum(ad.square(W), axis=0), 0.0)
    return mean, var


def cond_rows(E, Z, G_hat, embed_kernel: SEKernel, Kzz_chol, Kww_chol, noise):
    """Independent reparameterized rows of ``F`` given ``G = G_hat``.

    Row ``b`` is ``Gamma_b + sqrt(Omega_bb) * Kww_chol @ noise[b]``.
    """
    mean, var = cond_moments(E, Z, G_hat, embed_kernel, Kzz_chol)
    if np.shape(noise) != np.shape(ad.value(mean)):
        raise ValueError(f"noise shape {np.shape(noise)} != {np.shape(ad.value(mean))}")
    scaled = ad.matmul(noise, ad.transpose(Kww_chol))
    return mean + ad.reshape(ad.sqrt(var), (-1, 1)) * scaled


def cond_row_sample(e_j, Z, G_hat, kernel: ProductKernel, K_omega_chol, noise,
                    jitter=DEFAULT_JITTER):
    """One row ``alpha_j`` of ``F`` given ``G_hat`` (factorizes ``K_ZZ`` itself)."""
    Lz, _ = chol_jitter(gram(kernel.embed, Z), jitter)
    row = cond_rows(
        ad.reshape(e_j, (1, -1)) if ad.is_var(e_j) else np.reshape(e_j, (1, -1)),
        Z, G_hat, kernel.embed, Lz, K_omega_chol,
        np.reshape(noise, (1, -1)),
    )
    return row[0]


def cond_scalars(V, Zg, h_hat, kernel: SEKernel, Kgg_chol, noise):
    """Reparameterized ``m(v_b) | h = h_hat`` for each row of ``V``."""
    mean, var = cond_moments(V, Zg, h_hat, kernel, Kgg_chol)
    if np.shape(noise) != np.shape(ad.value(mean)):
        raise ValueError(f"noise shape {np.shape(noise)} != {np.shape(ad.value(mean))}")
    return mean + ad.sqrt(var) * noise


def cond_scalar_sample(v, Z_g, h_hat, kernel: SEKernel, noise, jitter=DEFAULT_JITTER):
    Lg, _ = chol_jitter(gram(kernel, Z_g), jitter)
    vv = ad.reshape(v, (1, -1)) if ad.is_var(v) else np.reshape(v, (1, -1))
    return cond_scalars(vv, Z_g, h_hat, kernel, Lg, np.reshape(noise, (1,)))[0]


def gaussian_sample(q: GaussianPosterior, noise):
    return q.mean + ad.matmul(q.chol, noise)
