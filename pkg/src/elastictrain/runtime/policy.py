"""Small pure rules used by the job control plane."""
from __future__ import annotations

import math
from statistics import median
from typing import Mapping, Optional, Sequence


class InvalidBatch(ValueError):
    pass


def split_batch(B: int, p: int) -> list[int]:
    """Per-worker batch sizes summing to ``B``; larger shares go to low ranks."""
    if p < 1 or B < p:
        raise InvalidBatch(f"cannot split aggregate batch {B} over {p} workers")
    q, rem = divmod(B, p)
    return [q + 1 if r < rem else q for r in range(p)]


def switch_delay(T_a: float, T_b: float) -> int:
    """Mini-batches between the OK broadcast and the topology switch.

    ``max(1, ceil(T_a / T_b))`` so the switch always lies in the future.
    """
    if T_b <= 0:
        return 1
    return max(1, math.ceil(T_a / T_b))


STRAGGLER_FACTOR = 1.2
STRAGGLER_WINDOW = 10


def detect_straggler(window: Sequence[Mapping[str, float]],
                     factor: float = STRAGGLER_FACTOR,
                     length: int = STRAGGLER_WINDOW) -> Optional[str]:
    """Worker slower than ``factor`` x the median in each of the last ``length`` mini-batches.

    ``window`` holds one {worker: duration} mapping per completed mini-batch,
    oldest first. The comparison is strict. When several workers qualify the
    one with the largest mean slowdown is returned.
    """
    if len(window) < length:
        return None
    recent = window[-length:]
    candidates = None
    ratios: dict[str, float] = {}
    for durations in recent:
        if not durations:
            return None
        med = median(durations.values())
        slow = {w for w, d in durations.items() if d > factor * med}
        candidates = slow if candidates is None else candidates & slow
        if not candidates:
            return None
        for w in slow:
            ratios[w] = ratios.get(w, 0.0) + durations[w] / med
    return max(sorted(candidates), key=lambda w: ratios[w])
