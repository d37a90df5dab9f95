"""Problem instances and per-iteration traces shared by the solvers and the harness."""

from dataclasses import dataclass, field

import numpy as np

from .denoisers import BernoulliGaussianPrior, ClipChannel
from .operator import SpectralOperator

TRACE_SCHEMA = 1


def to_db(v):
    with np.errstate(divide="ignore"):
        return float(10.0 * np.log10(v)) if v > 0 else float("-inf")


@dataclass(frozen=True)
class GlmInstance:
    """One realized problem y = Clip(Ax) + n."""

    x_true: np.ndarray
    z_true: np.ndarray
    y: np.ndarray
    op: SpectralOperator
    prior: BernoulliGaussianPrior
    channel: ClipChannel
    seed: int = 0

    def __post_init__(self):
        if len(self.x_true) != self.op.N or len(self.z_true) != self.op.M or len(self.y) != self.op.M:
            raise ValueError("instance vectors do not match the operator shape")

    @property
    def signal_power(self):
        return self.prior.second_moment

    @property
    def z_power(self):
        """Expected power of z = Ax, lambda_1 times the signal power."""
        return float(np.sum(self.op.singular_values ** 2) / self.op.M) * self.signal_power


@dataclass
class IterationTrace:
    """Per-iteration MSE records of one run.

    ``kind`` is "simulated" for vector runs and "predicted" for state evolution.
    ``extras`` holds algorithm-specific per-iteration scalars.
    """

    algorithm: str
    kind: str = "simulated"
    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    stop_reason: str = "completed"
    extras: dict = field(default_factory=dict)

    def append(self, t, mse, v_pred=None, wall_ms=0.0):
        self.records.append({
            "t": int(t),
            "mse_x": float(mse),
            "mse_x_db": to_db(mse),
            "v_x_predicted": None if v_pred is None else float(v_pred),
            "wall_ms": float(wall_ms),
        })

    def add_extra(self, key, value):
        self.extras.setdefault(key, []).append(value)

    @property
    def mse(self):
        return np.array([r["mse_x"] for r in self.records])

    @property
    def mse_db(self):
        return np.array([r["mse_x_db"] for r in self.records])

    def __len__(self):
        return len(self.records)

    def to_dict(self):
        def clean(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, list):
                return [clean(u) for u in v]
            return v
        return {
            "schema_version": TRACE_SCHEMA,
            "algorithm": self.algorithm,
            "kind": self.kind,
            "stop_reason": self.stop_reason,
            "metadata": {k: clean(v) for k, v in self.metadata.items()},
            "records": self.records,
            "extras": {k: clean(v) for k, v in self.extras.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(algorithm=d["algorithm"], kind=d.get("kind", "simulated"),
                   records=list(d["records"]), metadata=dict(d.get("metadata", {})),
                   stop_reason=d.get("stop_reason", "completed"),
                   extras=dict(d.get("extras", {})))


@dataclass
class ScalarSeTrace(IterationTrace):
    """State-evolution output.

    ``phi_rows[t]`` and ``psi_rows[t]`` are the NLE cross-covariance rows of
    iteration t+1, which lets a vector run replay the SE covariances.
    """

    kind: str = "predicted"
    phi_rows: list = field(default_factory=list)
    psi_rows: list = field(default_factory=list)
