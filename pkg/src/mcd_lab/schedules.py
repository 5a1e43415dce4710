"""Time-dependent training coefficients.

Teacher momentum and the distillation weight both follow the standard
half-cosine ramp

    value(t) = end - (end - start) * (1 + cos(pi * t / T)) / 2

which starts at ``start``, ends at ``end`` and is monotone in between.
The contrastive weight on augmented views is the complement of the
distillation weight, so the two hand over smoothly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import StepOutOfRangeError


@dataclass
class ScheduleState:
    """Step counter plus the constants the schedules interpolate between."""

    step: int
    total_steps: int
    m0: float = 0.994
    beta: float = 0.2

    def __post_init__(self):
        if self.total_steps < 1:
            raise StepOutOfRangeError("total_steps must be >= 1")
        if not (0 <= self.step <= self.total_steps):
            raise StepOutOfRangeError(f"step {self.step} outside [0, {self.total_steps}]")


def cosine_ramp(t: int, total: int, start: float, end: float) -> float:
    """Half-cosine interpolation from start (t=0) to end (t=total)."""
    if total < 1:
        raise StepOutOfRangeError("total must be >= 1")
    if not (0 <= t <= total):
        raise StepOutOfRangeError(f"t {t} outside [0, {total}]")
    return end - (end - start) * (1.0 + math.cos(math.pi * t / total)) / 2.0


def momentum_at(s: ScheduleState) -> float:
    """EMA momentum: m0 at step 0, exactly 1 at the final step."""
    return cosine_ramp(s.step, s.total_steps, s.m0, 1.0)


def alpha_at(s: ScheduleState) -> float:
    """Distillation weight: 0 at step 0, 1 at the final step."""
    return cosine_ramp(s.step, s.total_steps, 0.0, 1.0)


def aug_nce_weight(s: ScheduleState) -> float:
    """Weight on contrastive terms that involve an augmented image.

    The complement of the distillation weight: contrastive supervision on
    augmented views fades out exactly as distillation fades in.
    """
    return 1.0 - alpha_at(s)
