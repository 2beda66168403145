"""Adam, the training loop, metrics and a finite-difference gradient checker."""
import csv
from dataclasses import dataclass, field
import math
import time

import numpy as np
from scipy.special import logsumexp

from nonfat import model
from nonfat.config import TrainConfig
from nonfat.data import Dataset, TensorMeta, format_real, minibatch_iter, split
from nonfat.errors import DivergenceError

__all__ = [
    "AdamState", "TrainConfig", "TrainHistory", "GradCheckResult", "adam_step", "train",
    "metrics", "grad_check", "tiny_model",
]

HISTORY_COLUMNS = ("epoch", "elbo", "train_rmse", "test_rmse", "test_ll", "seconds")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One Adam descent step on ``params`` (a name -> array dict).

    Returns new ``(params, state)``; the inputs are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    m, v, out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m[name] = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v[name] = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** step)
        v_hat = v[name] / (1 - b2 ** step)
        out[name] = (p - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return out, AdamState(m, v, step, b1, b2, state.eps)


# -- metrics --------------------------------------------------------------------


def metrics(pred: model.Prediction, truth):
    """``(rmse, mean log-likelihood)`` of a prediction against observed values.

    The log-likelihood of a point is ``log mean_s N(y | m_s, sigma^2)`` over
    the latent samples ``m_s``.
    """
    y = np.asarray(truth, dtype=float).reshape(-1)
    if len(y) == 0:
        raise ValueError("metrics of an empty set")
    if len(y) != len(pred.mean):
        raise ValueError(f"{len(pred.mean)} predictions for {len(y)} values")
    rmse = float(np.sqrt(np.mean((pred.mean - y) ** 2)))
    s2 = pred.noise_var
    dens = -0.5 * math.log(2 * math.pi * s2) - 0.5 * (y - pred.samples) ** 2 / s2
    ll = logsumexp(dens, axis=0) - math.log(len(pred.samples))
    return rmse, float(np.mean(ll))


def evaluate(params, data: Dataset, num_samples: int, seed: int):
    pred = model.predict(params, data.indices, data.times, num_samples, seed)
    return metrics(pred, data.values)


# -- training -----------------------------------------------------------------------


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([r[name] for r in self.records], dtype=float)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([r["epoch"]] + [format_real(r[c]) for c in HISTORY_COLUMNS[1:]])


def smoothed(x, window):
    """Trailing moving average (the first ``window - 1`` entries are dropped)."""
    x = np.asarray(x, dtype=float)
    if len(x) < window:
        return np.array([])
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window


def train(train_set: Dataset, test_set: Dataset, config: TrainConfig, log=None, params=None):
    """Fit the model and return ``(params at the selected epoch, history)``.

    Selection is on test RMSE (``config.selection == "test"``) or on a
    held-out slice of ``train_set`` (``"val"``). ``log`` is an optional
    callable receiving each epoch record.
    The recorded ``elbo`` is the mean of the minibatch estimates taken
    during the epoch.
    """
    select_set = test_set
    if config.selection == "val":
        train_set, select_set = split(train_set, 1.0 - config.val_frac, config.seed)
    if params is None:
        params = model.init(train_set.meta, config, config.seed)
    history = TrainHistory()
    best, best_score = params.copy(), math.inf
    state = AdamState()
    n = len(train_set)
    values = params.values
    start = time.perf_counter()
    for epoch in range(config.epochs):
        noise_rng = np.random.default_rng([config.seed, 1, epoch])
        elbos = []
        for b, rows in enumerate(minibatch_iter(n, config.batch_size, config.seed, epoch)):
            batch = train_set.subset(rows)
            total, grads = 0.0, None
            for _ in range(config.num_elbo_samples):
                noise = model.NoiseBundle.draw(params, len(rows), noise_rng)
                try:
                    val, g = model.elbo_and_grad(params, batch, n, noise)
                except DivergenceError as exc:
                    raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}") from exc
                total += val
                grads = g if grads is None else {k: grads[k] + g[k] for k in g}
            scale = 1.0 / config.num_elbo_samples
            neg = {k: -scale * g for k, g in grads.items()}
            try:
                values, state = adam_step(values, neg, state, config.learning_rate)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}") from exc
            params.values = values
            elbos.append(total * scale)
        train_rmse, _ = evaluate(params, train_set, config.num_pred_samples, config.seed)
        test_rmse, test_ll = evaluate(params, test_set, config.num_pred_samples, config.seed)
        score = test_rmse
        if select_set is not test_set:
            score, _ = evaluate(params, select_set, config.num_pred_samples, config.seed)
        rec = {
            "epoch": epoch,
            "elbo": float(np.mean(elbos)),
            "train_rmse": train_rmse,
            "test_rmse": test_rmse,
            "test_ll": test_ll,
            "seconds": time.perf_counter() - start,
        }
        history.records.append(rec)
        if score < best_score:
            best_score, best = score, params.copy()
            history.best_epoch = epoch
        if log is not None:
            log(rec)
    return best, history


# -- gradient check -------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_name: str
    worst_index: tuple
    analytic: float
    numeric: float
    num_checked: int


def _rel_err(a, b, floor):
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(params, batch, eps=1e-4, seed=0, n_total=None, max_scalars=2000,
               floor=1e-6) -> GradCheckResult:
    """Compare tape gradients of the ELBO with central differences.

    Every scalar the objective depends on is perturbed unless there are more
    than ``max_scalars``, in which case a seeded random subset of that size
    is used. The noise bundle is drawn once from ``seed``. ``floor`` keeps the
    relative error meaningful for gradients that are zero up to round-off.
    """
    if any(v.dtype != np.float64 for v in params.values.values()):
        raise ValueError("gradient check requires double precision parameters")
    indices, y, times = model._as_batch(batch)
    n_total = len(y) if n_total is None else n_total
    rng = np.random.default_rng(seed)
    noise = model.NoiseBundle.draw(params, len(y), rng)
    _, grads = model.elbo_and_grad(params, (indices, y, times), n_total, noise)

    coords = [(name, idx) for name in sorted(params.values)
              for idx in np.ndindex(params.values[name].shape) if params.mask(name)[idx]]
    if len(coords) > max_scalars:
        pick = np.sort(rng.choice(len(coords), size=max_scalars, replace=False))
        coords = [coords[i] for i in pick]

    probe = params.copy()
    worst = GradCheckResult(0.0, "", (), 0.0, 0.0, len(coords))
    for name, idx in coords:
        arr = probe.values[name]
        orig = arr[idx]
        arr[idx] = orig + eps
        up = model.elbo_estimate(probe, (indices, y, times), n_total, noise)
        arr[idx] = orig - eps
        down = model.elbo_estimate(probe, (indices, y, times), n_total, noise)
        arr[idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = float(grads[name][idx])
        err = _rel_err(analytic, numeric, floor)
        if err > worst.max_rel_error or not worst.worst_name:
            worst = GradCheckResult(err, name, tuple(int(i) for i in idx), analytic, numeric,
                                    len(coords))
    return worst


def tiny_model(seed=0):
    """A small, non-degenerate model and batch for gradient checking.

    Shapes: two modes of three entities, ``R = 2``, ``C = 3``, ``s = 2``,
    two frequency pseudo inputs per mode, three entry pseudo inputs and a
    batch of four observations.
    """
    rng = np.random.default_rng(seed)
    meta = TensorMeta(2, (3, 3), 0.0, 1.0)
    cfg = TrainConfig(R=2, C=3, s=2, a_k=2, a_g=3, batch_size=4)
    p = model.init(meta, cfg, seed)
    v = p.values
    for name, arr in v.items():
        if name.startswith("embed/"):
            v[name] = rng.normal(scale=0.7, size=arr.shape)
        elif name.startswith("pseudo_in/"):
            v[name] = np.array([[-0.6, 0.3], [0.5, -0.4]]) + 0.05 * rng.normal(size=arr.shape)
        elif name == "entry_pseudo_in":
            v[name] = rng.normal(scale=0.8, size=arr.shape)
        elif name.startswith(("pseudo_out_mean/", "entry_pseudo_mean")):
            v[name] = rng.normal(size=arr.shape)
        elif p.is_triangular(name):
            v[name] = np.tril(rng.normal(scale=0.3, size=arr.shape)) + np.diag(
                rng.uniform(-1.0, -0.3, size=arr.shape[0])
            )
        elif name.startswith("log_ls"):
            v[name] = np.array(rng.uniform(-0.3, 0.5))
    v["log_noise_var"] = np.array(math.log(0.3))
    indices = rng.integers(0, 3, size=(4, 2))
    times = rng.uniform(0.0, 1.0, size=4)
    y = rng.normal(size=4)
    return p, (indices, y, times)
