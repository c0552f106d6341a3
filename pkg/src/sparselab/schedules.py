"""Time-dependent scalars: cubic sparsity ramp, regrowth-ratio decay, event grid.

All schedules are indexed by optimizer step, not epoch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class PruneSchedule:
    s_i: float = 0.0
    s_f: float = 0.9
    t0: int = 0
    delta_t: int = 1000
    n: int = 1

    def __post_init__(self):
        if not 0.0 <= self.s_i <= self.s_f < 1.0:
            raise ValueError(f"need 0 <= s_i <= s_f < 1, got s_i={self.s_i}, s_f={self.s_f}")
        if self.delta_t < 1 or self.n < 1 or self.t0 < 0:
            raise ValueError("need delta_t >= 1, n >= 1, t0 >= 0")

    @property
    def tf(self) -> int:
        return self.t0 + self.n * self.delta_t

    @property
    def grid(self) -> list:
        return [self.t0 + k * self.delta_t for k in range(self.n + 1)]

    @classmethod
    def from_epochs(cls, s_i, s_f, t0_epoch, tf_epoch, delta_t_steps, steps_per_epoch):
        """Convert epoch endpoints to steps.

        When the window is not a whole number of Δt the grid stops at the
        last multiple inside it (see ``window_remainder``).
        """
        t0 = int(round(t0_epoch * steps_per_epoch))
        tf = int(round(tf_epoch * steps_per_epoch))
        n = (tf - t0) // delta_t_steps
        if n < 1:
            raise ValueError(
                f"pruning window [{t0}, {tf}] steps is shorter than delta_t_steps={delta_t_steps} "
                f"(steps_per_epoch={steps_per_epoch})")
        return cls(s_i, s_f, t0, delta_t_steps, n)


def window_remainder(t0_epoch, tf_epoch, delta_t_steps, steps_per_epoch) -> int:
    """Steps between the last grid point and the requested end of pruning."""
    span = int(round(tf_epoch * steps_per_epoch)) - int(round(t0_epoch * steps_per_epoch))
    return span % delta_t_steps

def sparsity_at(sched: PruneSchedule, t: int) -> float:
    """s_t = s_f + (s_i - s_f) * (1 - (t - t0) / (n Δt))^3 on the event grid."""
    if t <= sched.t0:
        return sched.s_i
    if t >= sched.tf:
        return sched.s_f
    if (t - sched.t0) % sched.delta_t:
        raise ValueError(f"step {t} is not on the pruning grid (t0={sched.t0}, Δt={sched.delta_t})")
    frac = 1.0 - (t - sched.t0) / (sched.n * sched.delta_t)
    return sched.s_f + (sched.s_i - sched.s_f) * frac ** 3


def is_prune_step(sched: PruneSchedule, t: int) -> bool:
    return sched.t0 <= t <= sched.tf and (t - sched.t0) % sched.delta_t == 0


@dataclass(frozen=True)
class RegenSchedule:
    r0: float = 0.5
    t_end: int = 0
    shape: str = "cosine"

    def __post_init__(self):
        if not 0.0 <= self.r0 <= 1.0:
            raise ValueError("r0 must lie in [0, 1]")
        if self.shape not in ("cosine", "constant"):
            raise ValueError(f"unknown regeneration schedule {self.shape!r}")
        if self.t_end < 0:
            raise ValueError("t_end must be >= 0")


def regen_ratio_at(sched: RegenSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("step must be >= 0")
    if sched.shape == "constant" or sched.t_end == 0:
        return sched.r0
    return 0.5 * sched.r0 * (1.0 + math.cos(math.pi * min(t, sched.t_end) / sched.t_end))
