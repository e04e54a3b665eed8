"""Synchronous data-parallel SGD on small dense models.

Workers compute ``(grad_sum, count)`` over their local samples; the runtime
sums these over the ring and every worker applies
``w <- w - (eta_t / count) * grad_sum``. :func:`oracle_replay` re-runs the
same mini-batch compositions in a single process to check the distributed
result.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .allreduce import chunk_bounds

LEAST_SQUARES = "least_squares"
LOGISTIC = "logistic"
MODELS = (LEAST_SQUARES, LOGISTIC)


class DimensionMismatch(ValueError):
    pass


class ZeroCount(ValueError):
    pass


class LogCorrupt(ValueError):
    pass


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def local_gradient(w: np.ndarray, X: np.ndarray, y: np.ndarray,
                   model: str = LEAST_SQUARES) -> tuple[np.ndarray, int]:
    """Sum of per-sample gradients over a local batch.

    Least squares uses f = 0.5 (w.a - b)^2; logistic uses the negative
    log-likelihood with labels in {0, 1}.
    """
    w = np.asarray(w, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        X = X.reshape(0, len(w))
    if X.ndim != 2 or X.shape[1] != len(w) or len(X) != len(y):
        raise DimensionMismatch(f"w has {len(w)} entries, batch is {X.shape} with {len(y)} labels")
    if len(X) == 0:
        return np.zeros_like(w), 0
    z = X @ w
    if model == LEAST_SQUARES:
        r = z - y
    elif model == LOGISTIC:
        r = _sigmoid(z) - y
    else:
        raise ValueError(f"unknown model {model!r}")
    return X.T @ r, len(X)


def loss(w: np.ndarray, X: np.ndarray, y: np.ndarray, model: str = LEAST_SQUARES) -> float:
    """Mean per-sample loss."""
    z = X @ w
    if model == LEAST_SQUARES:
        return float(0.5 * np.mean((z - y) ** 2))
    # log(1 + e^z) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def sgd_step(w: np.ndarray, grad_sum: np.ndarray, count: Union[int, float], eta: float) -> np.ndarray:
    if count <= 0:
        raise ZeroCount("cannot average a gradient over zero samples")
    return w - (eta / count) * grad_sum


LearningRate = Union[float, Callable[[int], float]]


def eta_at(eta: LearningRate, t: int) -> float:
    value = eta(t) if callable(eta) else float(eta)
    if value <= 0:
        raise ValueError(f"learning rate must be positive, got {value} at step {t}")
    return value


@dataclass
class HyperParams:
    eta: LearningRate = 0.05
    batch_size: int = 64
    epochs: int = 1


def tensor_bounds(n_params: int, num_tensors: int) -> list[tuple[int, int]]:
    """How the (grad_sum, count) vector is cut into named tensors."""
    return chunk_bounds(n_params + 1, min(num_tensors, n_params + 1))


# ---------------------------------------------------------------------------
# assignment log


@dataclass
class LogRecord:
    t: int
    worker: str
    rank: int
    version: int
    epoch: int
    samples: list

    def to_json(self) -> str:
        return json.dumps({"t": self.t, "worker": self.worker, "rank": self.rank,
                           "version": self.version, "epoch": self.epoch,
                           "samples": self.samples}, separators=(",", ":"))


@dataclass
class AssignmentLog:
    """Exact mini-batch compositions of a distributed run.

    Serialized as JSON lines: a header line with the model setup followed by
    one record per (mini-batch, worker).
    """

    header: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def append(self, rec: LogRecord) -> None:
        self.records.append(rec)

    def truncate(self, t: int) -> None:
        """Drop records of mini-batches ``>= t`` (rolled back by a restart)."""
        self.records = [r for r in self.records if r.t < t]

    def batches(self) -> dict[int, list[LogRecord]]:
        out: dict[int, list[LogRecord]] = {}
        for r in self.records:
            out.setdefault(r.t, []).append(r)
        return dict(sorted(out.items()))

    def dump(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"header": self.header}) + "\n")
            for r in sorted(self.records, key=lambda r: (r.t, r.rank)):
                f.write(r.to_json() + "\n")

    @classmethod
    def load(cls, path: str) -> "AssignmentLog":
        log = cls()
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    if "header" in obj:
                        log.header = obj["header"]
                    else:
                        log.append(LogRecord(int(obj["t"]), str(obj["worker"]), int(obj["rank"]),
                                             int(obj["version"]), int(obj["epoch"]),
                                             [int(s) for s in obj["samples"]]))
                except (ValueError, KeyError, TypeError) as e:
                    raise LogCorrupt(f"{path}:{lineno}: {e}") from e
        return log


def oracle_replay(log: AssignmentLog, dataset, w0: Sequence[float],
                  eta: LearningRate = 0.05, model: str = LEAST_SQUARES,
                  num_tensors: Optional[int] = None, canonical: bool = True) -> np.ndarray:
    """Single-process SGD over the logged mini-batch compositions.

    With ``canonical`` the per-worker partial sums are combined in the same
    per-element order the ring uses, which makes the result bit-comparable
    with the distributed run. Otherwise the whole mini-batch is summed in one
    pass.
    """
    w = np.array(w0, dtype=np.float64)
    num_tensors = num_tensors or int(log.header.get("num_tensors", 1))
    for t, recs in log.batches().items():
        ranks = [r.rank for r in recs]
        if sorted(ranks) != list(range(len(recs))):
            raise LogCorrupt(f"mini-batch {t} has ranks {sorted(ranks)}")
        if len({r.version for r in recs}) != 1:
            raise LogCorrupt(f"mini-batch {t} mixes topology versions")
        recs = sorted(recs, key=lambda r: r.rank)
        if canonical:
            vecs = []
            for r in recs:
                X, y = dataset.samples(r.samples)
                g, c = local_gradient(w, X.reshape(-1, len(w)), y, model)
                vecs.append(np.append(g, float(c)))
            total = np.empty(len(w) + 1)
            n = len(vecs)
            for lo, hi in tensor_bounds(len(w), num_tensors):
                seg = [v[lo:hi] for v in vecs]
                for c, (a, b) in enumerate(chunk_bounds(hi - lo, n)):
                    acc = seg[c % n][a:b].copy()
                    for k in range(1, n):
                        acc = acc + seg[(c + k) % n][a:b]
                    total[lo + a:lo + b] = acc
            g, count = total[:-1], total[-1]
        else:
            ids = [s for r in recs for s in r.samples]
            X, y = dataset.samples(ids)
            g, count = local_gradient(w, X.reshape(-1, len(w)), y, model)
        w = sgd_step(w, g, count, eta_at(eta, t))
    return w


def sequential_sgd(dataset, batches: Iterable[Sequence[int]], w0, eta: LearningRate = 0.05,
                   model: str = LEAST_SQUARES) -> np.ndarray:
    w = np.array(w0, dtype=np.float64)
    for t, ids in enumerate(batches):
        X, y = dataset.samples(list(ids))
        g, c = local_gradient(w, X, y, model)
        w = sgd_step(w, g, c, eta_at(eta, t))
    return w
