"""Throughput curves: samples/sec as a function of parallelism."""
from __future__ import annotations

import math
from typing import Mapping


class ThroughputCurve:
    """``S(p)`` over a set of supported parallelisms.

    ``t(p) = S(p)/p`` is per-GPU throughput, ``p*`` maximises it, and the GPU
    efficiency is ``e(p) = t(p)/t(p*)``.
    """

    def __init__(self, S: Mapping[int, float], name: str = ""):
        if not S:
            raise ValueError("empty throughput curve")
        self.S = {int(p): float(v) for p, v in sorted(S.items())}
        for p, v in self.S.items():
            if p < 1 or not v > 0:
                raise ValueError(f"bad curve point S({p}) = {v}")
        self.name = name
        self.p_star = max(self.S, key=lambda p: (self.t(p), -p))
        self._t_star = self.t(self.p_star)

    @property
    def max_p(self) -> int:
        return max(self.S)

    def supports(self, p: int) -> bool:
        return p in self.S

    def t(self, p: int) -> float:
        return self.S[p] / p

    def e(self, p: int) -> float:
        return self.t(p) / self._t_star

    def rate(self, p: int) -> float:
        """Progress in optimal-efficiency GPU-seconds per second: ``p * e(p)``."""
        if p <= 0:
            return 0.0
        return self.S[p] / self._t_star

    def gain(self, p: int) -> float:
        """Relative throughput gain of one more GPU; -inf when unsupported."""
        if p + 1 not in self.S or p not in self.S:
            return -math.inf
        return (self.S[p + 1] - self.S[p]) / self.S[p]

    def to_dict(self) -> dict:
        return {str(p): v for p, v in self.S.items()}

    @classmethod
    def from_dict(cls, d: Mapping, name: str = "") -> "ThroughputCurve":
        return cls({int(p): float(v) for p, v in d.items()}, name)

    def __repr__(self):
        return f"ThroughputCurve({self.name!r}, p*={self.p_star}, max_p={self.max_p})"


def ring_curve(compute: float, sync: float, per_peer: float = 0.0, max_p: int = 32,
               batch: float = 32.0, name: str = "") -> ThroughputCurve:
    """Weak-scaling data-parallel throughput.

    Iteration time is ``compute + sync*2(p-1)/p + per_peer*(p-1)**2``: the
    ring allreduce cost saturates with p, while ``per_peer`` models costs that
    keep growing (e.g. contention from large fully connected layers) and
    produces a throughput peak.
    """
    S = {}
    for p in range(1, max_p + 1):
        it = compute + sync * 2 * (p - 1) / p + per_peer * (p - 1) ** 2
        S[p] = p * batch / it
    return ThroughputCurve(S, name)


def resnet_like(max_p: int = 32) -> dict[str, ThroughputCurve]:
    """Diminishing returns: throughput keeps growing, efficiency keeps falling."""
    return {
        "resnet50": ring_curve(0.20, 0.02, 0.00002, max_p, name="resnet50"),
        "resnet152": ring_curve(0.45, 0.05, 0.00004, max_p, name="resnet152"),
        "inception3": ring_curve(0.30, 0.04, 0.00003, max_p, name="inception3"),
    }


def vgg_like(max_p: int = 32) -> dict[str, ThroughputCurve]:
    """Throughput peaks around p=8 and then drops."""
    return {
        "vgg16": ring_curve(0.25, 0.10, 0.0063, max_p, name="vgg16"),
        "vgg19": ring_curve(0.30, 0.12, 0.0068, max_p, name="vgg19"),
    }


def default_library(max_p: int = 32) -> dict[str, ThroughputCurve]:
    lib = resnet_like(max_p)
    lib.update(vgg_like(max_p))
    return lib


def linear_curve(max_p: int = 32) -> ThroughputCurve:
    """Perfect scaling; every p has efficiency 1."""
    return ThroughputCurve({p: float(p) for p in range(1, max_p + 1)}, "linear")
