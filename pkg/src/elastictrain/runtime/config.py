"""Run configuration for an elastic job."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

CONSISTENT = "consistent"
APPROXIMATE = "approximate"


def recovery_mode_from_env(default: str = CONSISTENT) -> str:
    """``USE_APPX_RECOVERY=1`` selects approximate recovery; anything else is consistent."""
    value = os.environ.get("USE_APPX_RECOVERY")
    if value is None:
        return default
    return APPROXIMATE if value.strip() == "1" else CONSISTENT


@dataclass
class RunConfig:
    """Everything that determines an elastic training run.

    Times are simulated seconds. ``seed`` fixes the data permutations, the
    synthetic dataset, and all injected jitter.
    """

    n_workers: int = 4
    batch_size: int = 64
    n_samples: int = 4096
    n_features: int = 8
    model: str = "least_squares"
    dataset_manifest: Optional[str] = None
    n_partitions: Optional[int] = None
    max_workers: int = 16
    eta: float = 0.05
    epochs: int = 1
    max_batches: Optional[int] = None
    num_tensors: int = 2
    seed: int = 0
    # timing model
    compute_fixed: float = 0.05
    compute_per_sample: float = 0.002
    compute_floor: float = 0.0
    link_latency: float = 1e-4
    bandwidth: float = 1e9  # bytes per second
    context_prep: float = 2.0
    time_allowance: float = 0.5  # T_a
    liveness_window: float = 2.0
    register_timeout: float = 30.0
    scale_in_allowance: float = 30.0
    checkpoint_io: float = 0.5
    # coordination
    lease_ttl: float = 3.0
    # recovery and checkpoints
    recovery: str = field(default_factory=recovery_mode_from_env)
    checkpoint_every_batches: int = 1000
    checkpoint_every_seconds: float = 600.0
    checkpoint_path: Optional[str] = None
    straggler_action: str = "advise"  # or "remove"
    backend: str = "inproc"  # or "tcp"
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.recovery not in (CONSISTENT, APPROXIMATE):
            raise ValueError(f"unknown recovery mode {self.recovery!r}")
        if self.straggler_action not in ("advise", "remove"):
            raise ValueError(f"unknown straggler action {self.straggler_action!r}")
        if self.backend not in ("inproc", "tcp"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.n_workers < 1 or self.batch_size < self.n_workers:
            raise ValueError("need 1 <= n_workers <= batch_size")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return asdict(self)
