"""Diffusion-time noise schedules and their closed-form integrals.

The log-linear schedule has cumulative noise sbar(t) = -log(1 - (1-eps) t),
so the per-token masking probability 1 - exp(-sbar(t)) = (1-eps) t is exactly
linear in t and caps at 1 - eps. Its rate is sigma(t) = dsbar/dt =
(1-eps) / (1 - (1-eps) t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

KINDS = ("log_linear",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise schedule with closed-form sigma(t), sbar(t), and mask probability.

    ``eps`` is the terminal unmasked fraction floor in (0, 1); eps = 0 is
    accepted for analysis (sbar(1) is then infinite).
    """

    eps: float = 1e-3
    kind: str = "log_linear"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown schedule kind {self.kind!r}; supported: {KINDS}")
        if not 0.0 <= self.eps < 1.0:
            raise ValidationError(f"eps must lie in [0, 1), got {self.eps}")

    def cumulative_noise(self, t):
        """sbar(t) = integral of sigma over [0, t]; -log(1 - (1-eps) t)."""
        t = _check_unit_time(t)
        return -np.log1p(-(1.0 - self.eps) * t)

    def instantaneous_noise(self, t):
        """sigma(t) = (1-eps) / (1 - (1-eps) t); singular at t = 1/(1-eps)."""
        t = np.asarray(t, dtype=np.float64)
        denom = 1.0 - (1.0 - self.eps) * t
        if (t < 0).any() or (denom <= 0).any():
            raise ValidationError(
                f"instantaneous noise defined for 0 <= t < {1.0 / (1.0 - self.eps) if self.eps < 1 else math.inf}"
            )
        out = (1.0 - self.eps) / denom
        return float(out) if out.ndim == 0 else out

    def mask_probability(self, t):
        """Probability that a token has been replaced by MASK at time t."""
        sbar = self.cumulative_noise(t)
        return -np.expm1(-sbar)

    def time_for_mask_probability(self, p) -> float:
        """Inverse of mask_probability, clamped to [0, 1]."""
        p = float(p)
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"mask probability must lie in [0, 1], got {p}")
        if self.eps >= 1.0:
            raise ValidationError("degenerate schedule")
        return min(1.0, p / (1.0 - self.eps))


def _check_unit_time(t):
    t = np.asarray(t, dtype=np.float64)
    if (t < 0).any() or (t > 1).any():
        raise ValidationError(f"diffusion time must lie in [0, 1], got {t}")
    return float(t) if t.ndim == 0 else t


def cumulative_noise(sched: NoiseSchedule, t):
    return sched.cumulative_noise(t)


def instantaneous_noise(sched: NoiseSchedule, t):
    return sched.instantaneous_noise(t)


def mask_probability(sched: NoiseSchedule, t):
    return sched.mask_probability(t)
