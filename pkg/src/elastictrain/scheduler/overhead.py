"""Cost of changing a job's parallelism."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class OverheadModel:
    """Seconds lost per parallelism change.

    ``scale_out_stall`` and ``scale_in_stall`` stop the whole job.
    ``newcomer_prep`` is how long added GPUs sit allocated but unused while
    their execution context is prepared; the job keeps training at its old
    parallelism meanwhile. ``stop_resume`` marks schemes where every change
    restarts the job, so all GPUs stall for the full duration.
    """

    scale_out_stall: float = 0.0
    scale_in_stall: float = 0.0
    newcomer_prep: float = 0.0
    stop_resume: bool = False
    name: str = "custom"

    def __post_init__(self):
        for k in ("scale_out_stall", "scale_in_stall", "newcomer_prep"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


EDL = OverheadModel(scale_out_stall=1.0, scale_in_stall=0.0, newcomer_prep=20.0, name="edl")
STOP_RESUME = OverheadModel(scale_out_stall=40.0, scale_in_stall=40.0, stop_resume=True,
                            name="stop-resume")
IDEAL = OverheadModel(name="ideal")

PRESETS = {"edl": EDL, "stop-resume": STOP_RESUME, "ideal": IDEAL}


def preset(name: str, **overrides) -> OverheadModel:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown overhead preset {name!r}; choose from {sorted(PRESETS)}") from None
    if not overrides:
        return base
    d = base.to_dict()
    d.update(overrides)
    return OverheadModel(**d)


def stop_resume_model(stall: float) -> OverheadModel:
    return OverheadModel(scale_out_stall=stall, scale_in_stall=stall, stop_resume=True,
                         name="stop-resume")


def transient_value(p: int, g: int, L: float, model: OverheadModel) -> tuple[float, float]:
    """Effective GPU-seconds over an idle window of ``L`` seconds with ``g`` spare GPUs.

    The job scales from ``p`` to ``p+g`` when the GPUs free up and back to
    ``p`` when they are reclaimed. Returns ``(with_scaling, baseline)`` where
    the baseline ignores the spare GPUs.
    """
    if L <= 0:
        raise ValueError("interval must be positive")
    stall = model.scale_out_stall + model.scale_in_stall
    old = p * max(0.0, L - stall)
    new = g * max(0.0, L - stall - model.newcomer_prep)
    return old + new, float(p * L)


def break_even_interval(p: int, g: int, model: OverheadModel) -> float:
    """Smallest ``L`` above which using the spare GPUs beats the baseline."""
    stall = model.scale_out_stall + model.scale_in_stall
    if g <= 0:
        return math.inf
    # for L >= stall + prep: (p+g)(L - stall) - g*prep > p*L
    L = ((p + g) * stall + g * model.newcomer_prep) / g
    return max(L, stall + model.newcomer_prep)
