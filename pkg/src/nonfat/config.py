"""Training hyperparameters."""
from dataclasses import asdict, dataclass, fields

SELECTION_MODES = ("test", "val")
DTYPES = ("float64", "float32")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters, seeds and schedule for one training run.

    ``R`` trajectories per entity, quadrature order ``C``, embedding
    dimension ``s``, ``a_k`` frequency pseudo inputs per mode and ``a_g``
    entry-level pseudo inputs. ``selection`` picks the snapshot criterion:
    ``"test"`` keeps the epoch with the smallest test RMSE, ``"val"`` holds
    out ``val_frac`` of the training set and selects on that instead.
    """

    R: int = 3
    C: int = 10
    s: int = 3
    a_k: int = 100
    a_g: int = 100
    batch_size: int = 100
    learning_rate: float = 1e-3
    epochs: int = 500
    seed: int = 0
    jitter: float = 1e-3
    num_pred_samples: int = 20
    per_r_kernels: bool = False
    dtype: str = "float64"
    num_elbo_samples: int = 1
    selection: str = "test"
    val_frac: float = 0.1

    def __post_init__(self):
        for name in ("R", "C", "s", "a_k", "a_g", "batch_size", "num_pred_samples",
                     "num_elbo_samples"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v!r}")
        if isinstance(self.epochs, bool) or not isinstance(self.epochs, int) or self.epochs < 0:
            raise ValueError(f"epochs must be an integer >= 0, got {self.epochs!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ValueError(f"seed must be an integer, got {self.seed!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if not self.jitter >= 0:
            raise ValueError(f"jitter must be >= 0, got {self.jitter!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"selection must be one of {SELECTION_MODES}, got {self.selection!r}")
        if not 0 < self.val_frac < 1:
            raise ValueError(f"val_frac must lie in (0, 1), got {self.val_frac!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        return TrainConfig.from_dict({**self.to_dict(), **changes})
