"""Per-view geometry feature masking and the geometric attention strength schedule.

Step convention: t counts the noise level, t = T is the noisiest state where
sampling starts. The geometry branch weight is zero for t < T/2 and grows
geometrically from ``lambda_min`` at t = T/2 to ``lambda_max`` at t = T, so the
strongest geometric guidance happens early in the reverse loop.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .render import CameraPose, orbit_direction


_COS_ZERO = 4 * np.finfo(np.float64).eps


@dataclass(frozen=True)
class ScheduleParams:
    total_steps_T: int = 1000
    lambda_max: float = 0.3
    lambda_min: float = 1e-5
    clamp_negative_cos: bool = True

    def __post_init__(self):
        if not 0.0 < self.lambda_min < self.lambda_max <= 1.0:
            raise ValueError("need 0 < lambda_min < lambda_max <= 1")
        if self.total_steps_T < 2 or self.total_steps_T % 2:
            raise ValueError("total_steps_T must be even and at least 2")


@dataclass(frozen=True)
class ViewGeometry:
    view_index_n: int
    delta_theta_n: float  # radians in [0, pi]


def view_deviation(target: CameraPose, input_view: CameraPose) -> float:
    """Angle in radians between the target-to-camera directions of two orbit poses."""
    d_t = orbit_direction(target.azimuth_deg, target.elevation_deg)
    d_i = orbit_direction(input_view.azimuth_deg, input_view.elevation_deg)
    # atan2 stays accurate near 0 and pi where acos of the dot product does not
    return math.atan2(float(np.linalg.norm(np.cross(d_t, d_i))), float(d_t @ d_i))


def mask_scale(delta_theta: float, p: ScheduleParams = ScheduleParams()) -> float:
    if not 0.0 <= delta_theta <= math.pi:
        raise ValueError(f"view deviation {delta_theta} outside [0, pi]")
    s = math.cos(delta_theta)
    if abs(s) < _COS_ZERO:
        s = 0.0  # float pi/2 leaves a 6e-17 residue; a perpendicular view is fully masked
    return max(s, 0.0) if p.clamp_negative_cos else s


def apply_geo_mask(f_geo: np.ndarray, delta_theta: float, p: ScheduleParams = ScheduleParams()) -> np.ndarray:
    """Scale geometry features by cos(delta_theta), clamped at zero by default."""
    return np.asarray(f_geo, dtype=np.float64) * mask_scale(delta_theta, p)


def lambda_geo(t: float, p: ScheduleParams = ScheduleParams()) -> float:
    T = p.total_steps_T
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    half = T // 2
    if t < half:
        return 0.0
    return p.lambda_min * (p.lambda_max / p.lambda_min) ** ((t - half) / half)


def dump_schedule(p: ScheduleParams, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "lambda_geo"])
        for t in range(p.total_steps_T + 1):
            writer.writerow([t, f"{lambda_geo(t, p):.12g}"])
