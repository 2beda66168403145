"""NONFAT: factor trajectories from a frequency-domain GP, entries from a second GP.

Each entity ``j`` of mode ``k`` owns an embedding ``e^k_j``. For component
``r`` a first-level GP ``f^k_r(e, w)`` over (embedding, frequency) pairs
gives the weighted spectrum ``alpha`` at the Gauss-Laguerre nodes, and the
trajectory is the cosine synthesis

    u^k_{j,r}(t) = (1/pi) sum_c gamma_c alpha_c cos(w_c t).

The entry value ``m(t)`` is a second GP applied to the concatenated
trajectory values ``v(t)`` of the entry's entities. Both GPs are sparse:
the first through matrix-Gaussian pseudo outputs ``G^k_r`` (``a_k x C``),
the second through Gaussian pseudo outputs ``h`` (``a_g``). Sampling runs
in nested reparameterized form so the ELBO is a deterministic function of
the parameters once a :class:`NoiseBundle` is fixed.

Parameters live in a flat ``name -> ndarray`` dict so that optimizers,
gradient checks and checkpoints can treat them uniformly. Triangular
factors are stored raw: strict lower triangle as is, diagonal on the log
scale (see :func:`nonfat.autodiff.tril_param`).
"""
from dataclasses import dataclass, field
import math

import numpy as np

from nonfat import autodiff as ad
from nonfat.config import TrainConfig
from nonfat.data import Dataset, TensorMeta
from nonfat.errors import DivergenceError
from nonfat.gaussians import (
    GaussianPosterior,
    MatrixGaussian,
    cond_moments,
    cond_scalars,
    kl_gaussian_chol,
    kl_mg_chol,
    mg_sample,
)
from nonfat.kernels import SEKernel, chol_jitter, gram
from nonfat.quadrature import GLRule, gauss_laguerre, synth_batch

LOG_2PI = math.log(2.0 * math.pi)
INIT_SCALE = 0.1
PSEUDO_PERTURB = 0.01
INIT_NOISE_VAR = 0.1


@dataclass
class NonfatParams:
    """All learnable state plus the static shape information around it."""

    dims: tuple
    rank: int
    rule: GLRule
    embed_dim: int
    num_pseudo: int
    num_entry_pseudo: int
    per_r_kernels: bool = False
    jitter: float = 1e-6
    values: dict = field(default_factory=dict)

    @property
    def num_modes(self):
        return len(self.dims)

    @property
    def order(self):
        return self.rule.order

    @property
    def noise_var(self):
        return math.exp(float(self.values["log_noise_var"]))

    def kernel_suffix(self, k, r):
        return f"{k}/{r}" if self.per_r_kernels else f"{k}"

    def kernel_names(self):
        out = []
        for k in range(self.num_modes):
            keys = ([self.kernel_suffix(k, r) for r in range(self.rank)]
                    if self.per_r_kernels else [str(k)])
            for key in keys:
                out += [f"log_ls_embed/{key}", f"log_ls_freq/{key}"]
        return out + ["log_ls_entry"]

    def is_triangular(self, name):
        return name.startswith(("pseudo_out_row/", "pseudo_out_col/")) or name == "entry_pseudo_chol"

    def mask(self, name):
        """Boolean mask of the scalars of ``name`` the objective depends on."""
        v = self.values[name]
        if self.is_triangular(name):
            return np.tril(np.ones(v.shape, dtype=bool))
        return np.ones(v.shape, dtype=bool)

    def num_learnable(self):
        return int(sum(self.mask(n).sum() for n in self.values))

    def copy(self):
        return NonfatParams(
            self.dims, self.rank, self.rule, self.embed_dim, self.num_pseudo,
            self.num_entry_pseudo, self.per_r_kernels, self.jitter,
            {k: np.array(v) for k, v in self.values.items()},
        )

    def with_values(self, values):
        out = self.copy()
        out.values = {k: np.array(v) for k, v in values.items()}
        return out

    def shapes(self):
        return {k: v.shape for k, v in self.values.items()}

    def meta_dict(self):
        return {
            "dims": list(self.dims),
            "rank": self.rank,
            "order": self.order,
            "embed_dim": self.embed_dim,
            "num_pseudo": self.num_pseudo,
            "num_entry_pseudo": self.num_entry_pseudo,
            "per_r_kernels": self.per_r_kernels,
            "jitter": self.jitter,
        }

    @classmethod
    def from_meta_dict(cls, d, values):
        return cls(
            tuple(d["dims"]), d["rank"], gauss_laguerre(d["order"]), d["embed_dim"],
            d["num_pseudo"], d["num_entry_pseudo"], d["per_r_kernels"], d["jitter"],
            dict(values),
        )


def init(meta: TensorMeta, config: TrainConfig, seed: int) -> NonfatParams:
    """Initial parameters; identical for identical ``seed``."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    K, R, C, s, a = meta.num_modes, config.R, config.C, config.s, config.a_k
    p = NonfatParams(tuple(meta.dims), R, gauss_laguerre(C), s, a, config.a_g,
                     config.per_r_kernels, config.jitter)
    vals = {}
    log_diag = np.log(INIT_SCALE)
    for k, d in enumerate(meta.dims):
        E = INIT_SCALE * rng.standard_normal((d, s))
        rows = rng.choice(d, size=a, replace=a > d)
        vals[f"embed/{k}"] = E
        vals[f"pseudo_in/{k}"] = E[rows] + PSEUDO_PERTURB * rng.standard_normal((a, s))
        for r in range(R):
            vals[f"pseudo_out_mean/{k}/{r}"] = np.zeros((a, C))
            vals[f"pseudo_out_row/{k}/{r}"] = np.diag(np.full(a, log_diag))
            vals[f"pseudo_out_col/{k}/{r}"] = np.diag(np.full(C, log_diag))
    vals["entry_pseudo_in"] = INIT_SCALE * rng.standard_normal((config.a_g, K * R))
    vals["entry_pseudo_mean"] = np.zeros(config.a_g)
    vals["entry_pseudo_chol"] = np.diag(np.full(config.a_g, log_diag))
    for name in p.kernel_names():
        vals[name] = np.zeros(())
    vals["log_noise_var"] = np.array(math.log(INIT_NOISE_VAR))
    p.values = {k: np.asarray(v, dtype=dtype) for k, v in vals.items()}
    return p


# -- noise --------------------------------------------------------------------


@dataclass
class NoiseBundle:
    """Standard-normal draws that make one ELBO evaluation deterministic.

    ``pseudo[k]`` is ``(R, a_k, C)`` (one ``G^k_r`` draw per evaluation),
    ``rows`` is ``(B, K, R, C)``, ``entry`` is ``(a_g,)`` and ``scalar``
    is ``(B,)``.
    """

    pseudo: list
    rows: np.ndarray
    entry: np.ndarray
    scalar: np.ndarray

    @property
    def batch_size(self):
        return len(self.scalar)

    @classmethod
    def draw(cls, params: NonfatParams, batch_size: int, rng):
        K, R, C = params.num_modes, params.rank, params.order
        pseudo = [rng.standard_normal((R, params.num_pseudo, C)) for _ in range(K)]
        rows = rng.standard_normal((batch_size, K, R, C))
        entry = rng.standard_normal(params.num_entry_pseudo)
        scalar = rng.standard_normal(batch_size)
        return cls(pseudo, rows, entry, scalar)

    @classmethod
    def zeros(cls, params: NonfatParams, batch_size: int):
        K, R, C = params.num_modes, params.rank, params.order
        return cls(
            [np.zeros((R, params.num_pseudo, C)) for _ in range(K)],
            np.zeros((batch_size, K, R, C)),
            np.zeros(params.num_entry_pseudo),
            np.zeros(batch_size),
        )

    def take(self, rows):
        """Per-point noise for ``rows``; per-evaluation noise is shared."""
        rows = np.asarray(rows, dtype=np.int64)
        return NoiseBundle(self.pseudo, self.rows[rows], self.entry, self.scalar[rows])


# -- forward path -------------------------------------------------------------


class _Forward:
    """Per-evaluation quantities shared by all batch rows.

    ``P`` maps parameter names to arrays or tape variables; every method is
    differentiable when they are variables.
    """

    def __init__(self, params: NonfatParams, P, noise: NoiseBundle):
        self.params, self.P, self.noise = params, P, noise
        self.nodes = params.rule.nodes.reshape(-1, 1)
        self._mode = {}
        self._entry = None

    def _kernel(self, kind, k, r):
        return SEKernel(self.P[f"log_ls_{kind}/{self.params.kernel_suffix(k, r)}"])

    def mode(self, k):
        """Prior factors, posteriors and pseudo-output draws of mode ``k``."""
        if k in self._mode:
            return self._mode[k]
        p, P = self.params, self.P
        Z = P[f"pseudo_in/{k}"]
        groups = range(p.rank) if p.per_r_kernels else [0]
        chol = {}
        for g in groups:
            Lz, _ = chol_jitter(gram(self._kernel("embed", k, g), Z), p.jitter)
            Lw, _ = chol_jitter(gram(self._kernel("freq", k, g), self.nodes), p.jitter)
            chol[g] = (Lz, Lw)
        post, G_hat = [], []
        for r in range(p.rank):
            q = MatrixGaussian(
                P[f"pseudo_out_mean/{k}/{r}"],
                ad.tril_param(P[f"pseudo_out_row/{k}/{r}"]),
                ad.tril_param(P[f"pseudo_out_col/{k}/{r}"]),
            )
            post.append(q)
            G_hat.append(mg_sample(q, self.noise.pseudo[k][r]))
        out = (chol, post, G_hat)
        self._mode[k] = out
        return out

    def entry(self):
        if self._entry is None:
            P = self.P
            kern = SEKernel(P["log_ls_entry"])
            Lg, _ = chol_jitter(gram(kern, P["entry_pseudo_in"]), self.params.jitter)
            q = GaussianPosterior(P["entry_pseudo_mean"], ad.tril_param(P["entry_pseudo_chol"]))
            h_hat = q.mean + ad.matmul(q.chol, self.noise.entry)
            self._entry = (kern, Lg, q, h_hat)
        return self._entry

    def kl(self):
        total = 0.0
        for k in range(self.params.num_modes):
            chol, post, _ = self.mode(k)
            for r, q in enumerate(post):
                Lz, Lw = chol[r if self.params.per_r_kernels else 0]
                total = total + kl_mg_chol(q, Lz, Lw)
        _, Lg, q, _ = self.entry()
        return total + kl_gaussian_chol(q, Lg)

    def alphas(self, k, ids, row_noise):
        """Sampled spectra ``alpha^k_{j,r}``: a list over ``r`` of ``(n, C)``.

        ``row_noise`` is ``(n, R, C)``. With shared kernels the conditional
        weights are computed once for all components.
        """
        p, P = self.params, self.P
        chol, _, G_hat = self.mode(k)
        E = ad.getitem(P[f"embed/{k}"], np.asarray(ids)) if ad.is_var(P[f"embed/{k}"]) \
            else np.asarray(P[f"embed/{k}"])[np.asarray(ids)]
        Z = P[f"pseudo_in/{k}"]
        C = p.order
        if p.per_r_kernels:
            moments = [cond_moments(E, Z, G_hat[r], self._kernel("embed", k, r), chol[r][0])
                       for r in range(p.rank)]
        else:
            mean, var = cond_moments(E, Z, ad.concatenate(G_hat, axis=1),
                                     self._kernel("embed", k, 0), chol[0][0])
            moments = [(mean[:, r * C:(r + 1) * C], var) for r in range(p.rank)]
        out = []
        for r, (mean, var) in enumerate(moments):
            Lw = chol[r if p.per_r_kernels else 0][1]
            scaled = ad.matmul(row_noise[:, r, :], ad.transpose(Lw))
            out.append(mean + ad.reshape(ad.sqrt(var), (-1, 1)) * scaled)
        return out

    def trajectories(self, k, ids, times, row_noise):
        """``(n, R)`` trajectory values of entities ``ids`` at ``times``."""
        alphas = self.alphas(k, ids, row_noise)
        n, R = len(ids), self.params.rank
        A = ad.reshape(ad.stack(alphas, axis=1), (n * R, self.params.order))
        u = synth_batch(A, self.params.rule, np.repeat(np.asarray(times, dtype=float), R))
        return ad.reshape(u, (n, R))

    def entry_values(self, indices, times):
        """Sampled latent values ``m(t)`` for each row of ``indices``."""
        indices = np.asarray(indices)
        v = ad.concatenate(
            [self.trajectories(k, indices[:, k], times, self.noise.rows[:, k])
             for k in range(self.params.num_modes)],
            axis=1,
        )
        kern, Lg, _, h_hat = self.entry()
        return cond_scalars(v, self.P["entry_pseudo_in"], h_hat, kern, Lg, self.noise.scalar)


def _check_noise(noise, n):
    if noise.batch_size != n or noise.rows.shape[0] != n:
        raise ValueError(f"noise bundle holds {noise.batch_size} rows, batch has {n}")


def _as_batch(batch):
    if isinstance(batch, Dataset):
        return batch.indices, batch.values, batch.times
    indices, values, times = batch
    return np.asarray(indices), np.asarray(values, dtype=float), np.asarray(times, dtype=float)


def sample_trajectories(params: NonfatParams, entities, t, noise: NoiseBundle):
    """Trajectory samples ``u^k_j(t)`` for ``entities = [(k, j), ...]``.

    Entity ``i`` uses ``noise.rows[i, k]``. Returns an ``(n, R)`` array.
    """
    _check_noise(noise, len(entities))
    fw = _Forward(params, params.values, noise)
    out = np.empty((len(entities), params.rank))
    for i, (k, j) in enumerate(entities):
        if not 0 <= j < params.dims[k]:
            raise IndexError(f"entity {j} out of range for mode {k} (size {params.dims[k]})")
        out[i] = fw.trajectories(k, [j], [t], noise.rows[i:i + 1, k])[0]
    return out


def sample_entry_value(params: NonfatParams, entry, t, noise: NoiseBundle) -> float:
    _check_noise(noise, 1)
    entry = np.asarray(entry, dtype=np.int64).reshape(1, -1)
    _check_entries(params, entry)
    fw = _Forward(params, params.values, noise)
    return float(fw.entry_values(entry, np.array([t], dtype=float))[0])


def _check_entries(params, indices):
    if indices.shape[1] != params.num_modes:
        raise ValueError(f"entries have {indices.shape[1]} modes, model has {params.num_modes}")
    if len(indices) and (indices.min() < 0 or np.any(indices.max(axis=0) >= params.dims)):
        raise IndexError(f"entity index out of range for dims {params.dims}")


def _elbo(P, params, indices, y, times, n_total, noise):
    fw = _Forward(params, P, noise)
    m = fw.entry_values(indices, times)
    log_var = P["log_noise_var"]
    resid = ad.square(y - m)
    loglik = ad.sum(-0.5 * LOG_2PI - 0.5 * log_var - 0.5 * resid / ad.exp(log_var))
    return loglik * (n_total / len(y)) - fw.kl()


def _prepare(params, batch, noise):
    indices, y, times = _as_batch(batch)
    if len(y) == 0:
        raise ValueError("batch is empty")
    _check_noise(noise, len(y))
    _check_entries(params, indices)
    return indices, y, times


def _guarded(params, fn):
    """Run ``fn`` and turn non-finite failures into :class:`DivergenceError`."""
    try:
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            return fn()
    except ValueError as exc:
        if "infs or NaNs" not in str(exc):
            raise
        raise DivergenceError(f"non-finite intermediate ({exc}); {_norm_report(params)}") from exc


def _finite_or_raise(params, val):
    if not math.isfinite(val):
        raise DivergenceError(f"ELBO is not finite ({val}); {_norm_report(params)}")


def elbo_estimate(params: NonfatParams, batch, n_total: int, noise: NoiseBundle) -> float:
    """Unbiased mini-batch estimate of the evidence lower bound."""
    indices, y, times = _prepare(params, batch, noise)
    val = _guarded(params, lambda: float(ad.value(
        _elbo(params.values, params, indices, y, times, n_total, noise))))
    _finite_or_raise(params, val)
    return val


def elbo_and_grad(params: NonfatParams, batch, n_total: int, noise: NoiseBundle):
    """ELBO estimate and its gradient (a dict keyed like ``params.values``)."""
    indices, y, times = _prepare(params, batch, noise)
    leaves = {name: ad.Var(v, name=name) for name, v in params.values.items()}
    out = _guarded(params, lambda: _elbo(leaves, params, indices, y, times, n_total, noise))
    val = float(ad.value(out))
    _finite_or_raise(params, val)
    _guarded(params, out.backward)
    grads = {}
    for name, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    return val, grads


def elbo_graph(params: NonfatParams, batch, n_total: int, noise: NoiseBundle):
    """The ELBO as a tape variable, for inspecting the computation graph."""
    indices, y, times = _prepare(params, batch, noise)
    leaves = {name: ad.Var(v, name=name) for name, v in params.values.items()}
    return _elbo(leaves, params, indices, y, times, n_total, noise)


def kl_divergences(params: NonfatParams):
    """Each KL term of the ELBO: keys ``"G/{k}/{r}"`` and ``"h"``."""
    fw = _Forward(params, params.values, NoiseBundle.zeros(params, 0))
    out = {}
    for k in range(params.num_modes):
        chol, post, _ = fw.mode(k)
        for r, q in enumerate(post):
            Lz, Lw = chol[r if params.per_r_kernels else 0]
            out[f"G/{k}/{r}"] = float(kl_mg_chol(q, Lz, Lw))
    _, Lg, q, _ = fw.entry()
    out["h"] = float(kl_gaussian_chol(q, Lg))
    return out


def _raw_tril(L):
    return np.tril(L, -1) + np.diag(np.log(np.diagonal(L)))


def match_prior(params: NonfatParams) -> NonfatParams:
    """Copy of ``params`` whose variational posteriors equal the priors."""
    out = params.copy()
    fw = _Forward(params, params.values, NoiseBundle.zeros(params, 0))
    for k in range(params.num_modes):
        chol, _, _ = fw.mode(k)
        for r in range(params.rank):
            Lz, Lw = chol[r if params.per_r_kernels else 0]
            out.values[f"pseudo_out_mean/{k}/{r}"][...] = 0.0
            out.values[f"pseudo_out_row/{k}/{r}"] = _raw_tril(Lz)
            out.values[f"pseudo_out_col/{k}/{r}"] = _raw_tril(Lw)
    _, Lg, _, _ = fw.entry()
    out.values["entry_pseudo_mean"][...] = 0.0
    out.values["entry_pseudo_chol"] = _raw_tril(Lg)
    return out


def _norm_report(params):
    norms = {k: float(np.linalg.norm(v)) for k, v in params.values.items()}
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)
    return "largest parameter norms: " + ", ".join(f"{k}={v:.3g}" for k, v in worst[:3])


# -- prediction -----------------------------------------------------------------


@dataclass
class Prediction:
    mean: np.ndarray
    var: np.ndarray
    samples: np.ndarray  # (S, n) latent samples
    noise_var: float

    @property
    def std(self):
        return np.sqrt(self.var)


def predict(params: NonfatParams, indices, times, num_samples: int, seed: int) -> Prediction:
    """Monte-Carlo predictive moments of ``y`` at each (entry, time) pair."""
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, params.num_modes)
    times = np.asarray(times, dtype=float).reshape(-1)
    _check_entries(params, indices)
    # repeated (entry, time) queries share their noise and hence their samples
    keys = np.column_stack([indices.astype(float), times])
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    u_idx, u_t = uniq[:, :-1].astype(np.int64), uniq[:, -1]
    rng = np.random.default_rng(seed)
    samples = np.empty((num_samples, len(uniq)))
    for s in range(num_samples):
        noise = NoiseBundle.draw(params, len(uniq), rng)
        samples[s] = _Forward(params, params.values, noise).entry_values(u_idx, u_t)
    samples = samples[:, inverse]
    noise_var = params.noise_var
    return Prediction(samples.mean(axis=0), samples.var(axis=0) + noise_var, samples, noise_var)


def export_trajectory(params: NonfatParams, mode: int, entity: int, component: int,
                      time_grid, num_samples: int, seed: int):
    """Monte-Carlo mean and std of ``u^k_{j,r}`` over ``time_grid``.

    Each sample draws one spectrum for the entity and evaluates it on the
    whole grid, so the curves are coherent functions of time.
    """
    if not 0 <= mode < params.num_modes:
        raise IndexError(f"mode {mode} out of range")
    if not 0 <= entity < params.dims[mode]:
        raise IndexError(f"entity {entity} out of range for mode {mode}")
    if not 0 <= component < params.rank:
        raise IndexError(f"component {component} out of range")
    grid = np.asarray(time_grid, dtype=float).reshape(-1)
    if not np.all(np.isfinite(grid)):
        raise ValueError("time grid must be finite")
    rng = np.random.default_rng(seed)
    curves = np.empty((num_samples, len(grid)))
    for s in range(num_samples):
        noise = NoiseBundle.draw(params, 1, rng)
        alpha = _Forward(params, params.values, noise).alphas(mode, [entity], noise.rows[:, mode])
        row = np.asarray(alpha[component])[0]
        curves[s] = synth_batch(np.tile(row, (len(grid), 1)), params.rule, grid)
    return curves.mean(axis=0), curves.std(axis=0)
