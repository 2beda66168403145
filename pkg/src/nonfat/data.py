"""Observations of a dynamic tensor: ingestion, splitting, scaling, batching.

A dataset is a set of ``(entry, value, time)`` events where ``entry`` is a
tuple of per-mode entity ids. Everything is stored column-wise in numpy
arrays; :class:`Observation` is only the row view.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
import math
from pathlib import Path
from typing import Iterator

import numpy as np

from nonfat.errors import DataError


@dataclass(frozen=True)
class Observation:
    indices: tuple
    value: float
    time: float


@dataclass(frozen=True)
class TensorMeta:
    num_modes: int
    dims: tuple
    time_min: float
    time_max: float

    def __post_init__(self):
        if self.num_modes < 1 or len(self.dims) != self.num_modes:
            raise DataError(f"dims {self.dims} inconsistent with {self.num_modes} modes")
        if any(int(d) < 1 for d in self.dims):
            raise DataError(f"mode dimensions must be positive, got {self.dims}")
        if not self.time_min <= self.time_max:
            raise DataError(f"time_min {self.time_min} > time_max {self.time_max}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    def to_dict(self):
        return {
            "num_modes": int(self.num_modes),
            "dims": list(self.dims),
            "time_min": float(self.time_min),
            "time_max": float(self.time_max),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["num_modes"]), tuple(d["dims"]), float(d["time_min"]),
                   float(d["time_max"]))


@dataclass(frozen=True)
class NormStats:
    """Affine maps fitted on the training split.

    Values are z-scored; times are mapped so the training range becomes
    ``[0, 1]`` (a degenerate range keeps unit scale).
    """

    value_mean: float
    value_std: float
    time_min: float
    time_scale: float

    def values(self, y):
        return (np.asarray(y, dtype=float) - self.value_mean) / self.value_std

    def times(self, t):
        return (np.asarray(t, dtype=float) - self.time_min) / self.time_scale

    def raw_values(self, z):
        return np.asarray(z, dtype=float) * self.value_std + self.value_mean

    def raw_times(self, s):
        return np.asarray(s, dtype=float) * self.time_scale + self.time_min

    def to_dict(self):
        return {
            "value_mean": float(self.value_mean),
            "value_std": float(self.value_std),
            "time_min": float(self.time_min),
            "time_scale": float(self.time_scale),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["value_mean"]), float(d["value_std"]), float(d["time_min"]),
                   float(d["time_scale"]))


@dataclass
class Dataset:
    meta: TensorMeta
    indices: np.ndarray  # (N, K) int64
    values: np.ndarray  # (N,)
    times: np.ndarray  # (N,)
    norm: NormStats | None = field(default=None)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, self.meta.num_modes)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        n = len(self.indices)
        if len(self.values) != n or len(self.times) != n:
            raise DataError("indices, values and times must have equal length")
        if n and (self.indices.min() < 0 or np.any(self.indices.max(axis=0) >= self.meta.dims)):
            raise DataError(f"entity index out of range for dims {self.meta.dims}")
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.times))):
            raise DataError("values and times must be finite")

    def __len__(self):
        return len(self.values)

    def __iter__(self) -> Iterator[Observation]:
        for idx, y, t in zip(self.indices, self.values, self.times):
            yield Observation(tuple(int(i) for i in idx), float(y), float(t))

    @property
    def value_mean(self):
        return None if self.norm is None else self.norm.value_mean

    @property
    def value_std(self):
        return None if self.norm is None else self.norm.value_std

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return replace(self, indices=self.indices[rows], values=self.values[rows],
                       times=self.times[rows])


def from_arrays(indices, values, times, dims=None) -> Dataset:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 2 or len(indices) == 0:
        raise DataError("no observations")
    times = np.asarray(times, dtype=float)
    if dims is None:
        dims = tuple(int(d) + 1 for d in indices.max(axis=0))
    meta = TensorMeta(indices.shape[1], tuple(dims), float(times.min()), float(times.max()))
    return Dataset(meta, indices, values, times)


def load_csv(path, num_modes: int, dims=None) -> Dataset:
    """Read ``i1,...,iK,value,time`` rows.

    ``dims`` defaults to the per-mode maximum index plus one. Errors name
    the offending line number (the header is line 1).
    """
    path = Path(path)
    if num_modes < 1:
        raise DataError(f"num_modes must be >= 1, got {num_modes}")
    width = num_modes + 2
    idx_rows, vals, times = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip().lower() for h in header]
        if len(header) != width or header[-2:] != ["value", "time"]:
            raise DataError(
                f"{path}: expected header with {num_modes} index columns then value,time; "
                f"got {','.join(header)}"
            )
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DataError(f"{path}: line {line}: expected {width} fields, got {len(row)}")
            try:
                idx = [int(c) for c in row[:num_modes]]
                y = float(row[num_modes])
                t = float(row[num_modes + 1])
            except ValueError as exc:
                raise DataError(f"{path}: line {line}: {exc}") from None
            if any(i < 0 for i in idx):
                raise DataError(f"{path}: line {line}: negative index")
            if not (math.isfinite(y) and math.isfinite(t)):
                raise DataError(f"{path}: line {line}: non-finite value or time")
            idx_rows.append(idx)
            vals.append(y)
            times.append(t)
    if not vals:
        raise DataError(f"{path}: no observations")
    indices = np.array(idx_rows, dtype=np.int64)
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if len(dims) != num_modes:
            raise DataError(f"dims {dims} do not match {num_modes} modes")
        bad = np.flatnonzero(np.any(indices >= np.array(dims), axis=1))
        if len(bad):
            raise DataError(f"{path}: line {bad[0] + 2}: index out of range for dims {dims}")
    return from_arrays(indices, vals, times, dims)


def write_csv(dataset: Dataset, path):
    K = dataset.meta.num_modes
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"i{k + 1}" for k in range(K)] + ["value", "time"])
        for idx, y, t in zip(dataset.indices, dataset.values, dataset.times):
            w.writerow([int(i) for i in idx] + [format_real(y), format_real(t)])


def format_real(x) -> str:
    """Locale-independent 17-significant-digit formatting."""
    return f"{float(x):.17g}"


def split(d: Dataset, train_frac: float, seed: int):
    """Uniform random partition into ``floor(N * train_frac)`` and the rest."""
    if not 0.0 < train_frac < 1.0:
        raise DataError(f"train_frac must be in (0, 1), got {train_frac}")
    n = len(d)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    n_train = int(math.floor(n * train_frac))
    if n_train == 0:
        raise DataError(f"train split is empty ({n} observations, frac {train_frac})")
    perm = np.random.default_rng(seed).permutation(n)
    return d.subset(np.sort(perm[:n_train])), d.subset(np.sort(perm[n_train:]))


def normalize(train: Dataset, test: Dataset):
    """Scale both splits with statistics of ``train`` only."""
    if len(train) == 0:
        raise DataError("cannot normalize an empty training set")
    std = float(np.std(train.values))
    if not std > 0:
        raise DataError("zero variance in training values")
    tmin, tmax = float(train.times.min()), float(train.times.max())
    scale = tmax - tmin if tmax > tmin else 1.0
    stats = NormStats(float(np.mean(train.values)), std, tmin, scale)
    return apply_norm(train, stats), apply_norm(test, stats), stats


def apply_norm(d: Dataset, stats: NormStats) -> Dataset:
    return replace(d, values=stats.values(d.values), times=stats.times(d.times), norm=stats)


def minibatch_iter(n, batch_size: int, seed: int, epoch: int):
    """Index batches of one epoch: a seeded permutation cut into chunks."""
    n = len(n) if hasattr(n, "__len__") else int(n)
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


# -- synthetic data -----------------------------------------------------------

SCENARIOS = ("cp-sin",)

# coefficient ranges of the cp-sin trajectories a*sin(2*pi*f*t + phi) + b
AMP_RANGE = (0.5, 1.0)
FREQ_RANGE = (0.1, 0.5)
OFFSET_RANGE = (-0.5, 0.5)


@dataclass
class GroundTruth:
    """Noiseless generator: ``sum_r prod_k (a sin(2 pi f t + phi) + b)``."""

    amp: list  # per mode: (d_k, R) arrays
    freq: list
    phase: list
    offset: list
    noise_std: float
    scenario: str = "cp-sin"

    @property
    def rank(self):
        return self.amp[0].shape[1]

    def trajectory(self, mode, entity, t):
        t = np.asarray(t, dtype=float)[..., None]
        a, f = self.amp[mode][entity], self.freq[mode][entity]
        return a * np.sin(2 * np.pi * f * t + self.phase[mode][entity]) + self.offset[mode][entity]

    def __call__(self, indices, times):
        indices = np.atleast_2d(np.asarray(indices, dtype=np.int64))
        times = np.atleast_1d(np.asarray(times, dtype=float))
        prod = np.ones((len(times), self.rank))
        for k in range(indices.shape[1]):
            prod = prod * self.trajectory(k, indices[:, k], times)
        return prod.sum(axis=1)

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "rank": self.rank,
            "noise_std": self.noise_std,
            "amp": [a.tolist() for a in self.amp],
            "freq": [f.tolist() for f in self.freq],
            "phase": [p.tolist() for p in self.phase],
            "offset": [b.tolist() for b in self.offset],
        }

    @classmethod
    def from_dict(cls, d):
        arr = lambda key: [np.asarray(x, dtype=float) for x in d[key]]  # noqa: E731
        return cls(arr("amp"), arr("freq"), arr("phase"), arr("offset"),
                   float(d["noise_std"]), d.get("scenario", "cp-sin"))


def synth_dataset(dims, num_obs: int, noise_std: float, seed: int, scenario="cp-sin",
                  rank=2, time_range=(0.0, 1.0)):
    """Sample entries and times uniformly and values from smooth trajectories."""
    if scenario not in SCENARIOS:
        raise DataError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    dims = tuple(int(d) for d in dims)
    if not dims or any(d < 1 for d in dims):
        raise DataError(f"invalid dims {dims}")
    if num_obs < 1:
        raise DataError("num_obs must be >= 1")
    if noise_std < 0:
        raise DataError("noise_std must be >= 0")
    rng = np.random.default_rng(seed)
    truth = GroundTruth(
        amp=[rng.uniform(*AMP_RANGE, size=(d, rank)) for d in dims],
        freq=[rng.uniform(*FREQ_RANGE, size=(d, rank)) for d in dims],
        phase=[rng.uniform(0, 2 * np.pi, size=(d, rank)) for d in dims],
        offset=[rng.uniform(*OFFSET_RANGE, size=(d, rank)) for d in dims],
        noise_std=float(noise_std),
        scenario=scenario,
    )
    indices = np.column_stack([rng.integers(0, d, size=num_obs) for d in dims])
    times = rng.uniform(*time_range, size=num_obs)
    clean = truth(indices, times)
    values = clean + noise_std * rng.standard_normal(num_obs) if noise_std > 0 else clean
    meta = TensorMeta(len(dims), dims, float(times.min()), float(times.max()))
    return Dataset(meta, indices, values, times), truth
