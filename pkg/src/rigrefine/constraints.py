"""Box constraints enforced by a temperature-scaled log barrier."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rig import GROUPS, INTRINSIC_GROUPS, ParamLayout

CLAMP_FRACTION = 1e-6


class OutOfBounds(ValueError):
    pass


def _default_group_bounds() -> dict:
    rot_phi = math.radians(0.625)
    rot_rho = math.radians(2.5)
    return {
        "phi_rot": (-rot_phi, rot_phi),
        "phi_trans": (-0.125, 0.125),
        "rho_rot": (-rot_rho, rot_rho),
        "rho_trans": (-0.5, 0.5),
        # fractions of the initial intrinsic value
        "fx": (-0.02, 0.02),
        "fy": (-0.02, 0.02),
        "cx": (-0.02, 0.02),
        "cy": (-0.02, 0.02),
    }


@dataclass(frozen=True)
class BarrierSpec:
    """Per-group bounds on the deltas.

    Pose groups are absolute (rad / m).  Intrinsic groups are fractions of
    the initial value, so ``fx: (-0.02, 0.02)`` keeps fx within 2% of where
    it started.
    """

    bounds: dict = field(default_factory=_default_group_bounds)

    def __post_init__(self):
        merged = _default_group_bounds()
        merged.update({k: tuple(map(float, v)) for k, v in self.bounds.items()})
        unknown = set(merged) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        for g, (lo, hi) in merged.items():
            if not lo < 0.0 < hi:
                raise ValueError(f"{g}: bounds ({lo}, {hi}) must strictly contain 0")
        object.__setattr__(self, "bounds", merged)

    def absolute(self, group: str, initial: float = 1.0) -> tuple:
        lo, hi = self.bounds[group]
        if group in INTRINSIC_GROUPS:
            return lo * abs(initial), hi * abs(initial)
        return lo, hi

    def arrays(self, layout: ParamLayout, intrinsics0=None):
        """Lower/upper bound vectors aligned with the flat parameter layout.

        ``intrinsics0`` is a (num_cameras, 4) array of initial (fx, fy, cx, cy),
        needed when the layout includes intrinsics.
        """
        lo = np.empty(layout.size)
        hi = np.empty(layout.size)
        for i, (g, owner) in enumerate(zip(layout.groups, layout.owners)):
            if g in INTRINSIC_GROUPS:
                init = intrinsics0[owner][INTRINSIC_GROUPS.index(g)]
            else:
                init = 1.0
            lo[i], hi[i] = self.absolute(str(g), init)
        return lo, hi


def default_bounds() -> BarrierSpec:
    return BarrierSpec()


@dataclass(frozen=True)
class TemperatureSchedule:
    t_start: float = 1.0
    t_end: float = 1e4
    total_iters: int = 5000

    def __post_init__(self):
        if not 0 < self.t_start <= self.t_end:
            raise ValueError("need 0 < t_start <= t_end")


def temperature(schedule: TemperatureSchedule, iteration: int) -> float:
    """Geometric ramp from ``t_start`` to ``t_end``."""
    if not 0 <= iteration <= schedule.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.total_iters}]")
    if schedule.total_iters == 0:
        return schedule.t_end
    frac = iteration / schedule.total_iters
    return schedule.t_start * (schedule.t_end / schedule.t_start) ** frac


def barrier_terms(x, lower, upper, temp, xp=np):
    """Unchecked elementwise barrier, zero at the midpoint of each interval."""
    half = (upper - lower) / 2.0
    return -(xp.log(x - lower) + xp.log(upper - x) - 2.0 * xp.log(half)) / temp


def _check(x, lower, upper):
    x = np.asarray(x, dtype=float)
    if np.any(x <= lower) or np.any(x >= upper):
        raise OutOfBounds(f"value outside ({lower}, {upper})")
    return x


def barrier_value(x, lower, upper, temp):
    """-(1/T) [log(x - lower) + log(upper - x)], shifted to vanish at the midpoint."""
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    x = _check(x, lower, upper)
    out = barrier_terms(x, lower, upper, temp)
    return float(out) if out.ndim == 0 else out


def barrier_gradient(x, lower, upper, temp):
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    x = _check(x, lower, upper)
    out = (1.0 / (upper - x) - 1.0 / (x - lower)) / temp
    return float(out) if out.ndim == 0 else out


def clamp_interior(x, lower, upper):
    """Pull values back inside (lower, upper) by CLAMP_FRACTION of the range."""
    margin = CLAMP_FRACTION * (np.asarray(upper) - np.asarray(lower))
    return np.clip(x, lower + margin, upper - margin)
