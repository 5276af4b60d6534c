"""Vector-field-histogram obstacle avoidance over LiDAR point clouds.

Pipeline: project near-altitude returns onto the horizontal plane, bin
inverse-range weights into azimuth sectors, smooth, then pick a steering
bearing through the best valley of free sectors. A narrow valley is taken
at its center, a wide one s_max/2 sectors in from the edge nearest the
target, and a deep free region straight toward the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .control import ControlSetpoint, SetpointMode
from .sensing import PointCloud
from .world import ValidationError

STOP = None  # steering value meaning "no valley: hold position"


@dataclass(frozen=True)
class HistogramConfig:
    sector_width: float = 5.0  # degrees
    weight_a: float = 40.0  # w = max(0, a - b * range)
    weight_b: float = 1.0
    threshold: float = 12.0  # sector free iff density < threshold
    smoothing_half_width: int = 3  # window weights 1..l..1 over 2l-1 sectors
    vertical_band: float = 1.5  # meters; |range*sin(elev)| above this is ignored

    def __post_init__(self):
        if self.sector_width <= 0 or 360.0 % self.sector_width > 1e-9:
            raise ValidationError("sector width must divide 360 evenly")
        if self.weight_a <= 0 or self.weight_b < 0:
            raise ValidationError("weight parameters must be positive")
        if self.threshold <= 0:
            raise ValidationError("threshold must be positive")
        if self.smoothing_half_width < 0:
            raise ValidationError("smoothing half-width must be >= 0")
        if self.vertical_band <= 0:
            raise ValidationError("vertical band must be positive")

    @property
    def sectors(self) -> int:
        return int(round(360.0 / self.sector_width))


@dataclass(frozen=True)
class PolarHistogram:
    sector_width: float  # degrees
    density: np.ndarray  # (sectors,)
    threshold: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.density)) or np.any(self.density < 0):
            raise ValidationError("densities must be finite and non-negative")

    @property
    def sectors(self) -> int:
        return int(self.density.shape[0])

    def sector_of(self, bearing: float) -> int:
        width = math.radians(self.sector_width)
        return int(math.floor((bearing % (2.0 * math.pi)) / width)) % self.sectors

    def sector_center(self, k: int) -> float:
        width = math.radians(self.sector_width)
        return (k + 0.5) * width

    def free(self, k: int) -> bool:
        return bool(self.density[k] < self.threshold)


def build_histogram(cloud: PointCloud, config: HistogramConfig) -> PolarHistogram:
    """Bin the cloud's near-altitude returns into azimuth sectors.

    Each kept point adds max(0, a - b*range) to its sector; the sector array
    is then circularly smoothed by the 1..l..1 window, normalized by l^2.
    """
    n_sec = config.sectors
    density = np.zeros(n_sec)
    if len(cloud):
        z = cloud.ranges * np.sin(cloud.elevations)
        keep = np.abs(z) <= config.vertical_band
        r = cloud.ranges[keep]
        az = cloud.azimuths[keep]
        w = np.maximum(0.0, config.weight_a - config.weight_b * r)
        width = math.radians(config.sector_width)
        idx = np.floor((az % (2.0 * math.pi)) / width).astype(int) % n_sec
        np.add.at(density, idx, w)
    ell = config.smoothing_half_width
    if ell > 1:
        kernel = np.array([ell - abs(j) for j in range(-(ell - 1), ell)], dtype=float)
        kernel /= float(ell * ell)
        padded = np.concatenate([density[-(ell - 1):], density, density[:ell - 1]])
        density = np.convolve(padded, kernel, mode="valid")
    return PolarHistogram(config.sector_width, density, config.threshold)


def _circular_distance(a: int, b: int, n: int) -> int:
    d = abs(a - b) % n
    return min(d, n - d)


def _valleys(free: np.ndarray) -> list[tuple[int, int]]:
    """Maximal circular runs of free sectors as (start, length)."""
    n = len(free)
    if free.all():
        return [(0, n)]
    if not free.any():
        return []
    out = []
    # start scanning just after a blocked sector so runs never wrap past start
    start = int(np.argmin(free))
    i = 0
    while i < n:
        j = (start + i) % n
        if free[j]:
            run = 0
            while run < n and free[(j + run) % n]:
                run += 1
            out.append((j, run))
            i += run
        else:
            i += 1
    return out


def select_heading(hist: PolarHistogram, target_bearing: float, s_max: int = 8):
    """Steering bearing through the best valley, or STOP when fully blocked.

    Valley choice: the one whose nearest edge sector is circularly closest
    to the target sector (containing the target counts as distance 0).
    Within the winner: narrow valleys (width < s_max) are taken at their
    center; wide ones s_max/2 sectors inside the edge nearest the target;
    if the target sector itself is free and at least s_max/2 sectors from
    both edges, the exact target bearing is returned.
    """
    if s_max < 1:
        raise ValidationError("s_max must be >= 1")
    n = hist.sectors
    free = hist.density < hist.threshold
    k_t = hist.sector_of(target_bearing)
    if free.all():
        return float(target_bearing)
    valleys = _valleys(free)
    if not valleys:
        return STOP

    def edge_distance(v):
        start, length = v
        end = (start + length - 1) % n
        offset = (k_t - start) % n
        if offset < length:
            return 0
        return min(_circular_distance(k_t, start, n), _circular_distance(k_t, end, n))

    def candidate(v):
        start, length = v
        end = (start + length - 1) % n
        if length < s_max:
            return (start + length // 2) % n
        offset = (k_t - start) % n
        inside = offset < length
        if inside and offset >= s_max // 2 and (length - 1 - offset) >= s_max // 2:
            return k_t
        # steer s_max/2 in from the edge nearest the target
        d_start = _circular_distance(k_t, start, n)
        d_end = _circular_distance(k_t, end, n)
        if inside:
            d_start, d_end = offset, length - 1 - offset
        if d_start <= d_end:
            return (start + s_max // 2) % n
        return (end - s_max // 2) % n

    best = None
    for v in valleys:
        cand = candidate(v)
        key = (edge_distance(v), _circular_distance(cand, k_t, n), cand)
        if best is None or key < best[0]:
            best = (key, cand)
    chosen = best[1]
    if chosen == k_t and free[k_t]:
        return float(target_bearing)
    return hist.sector_center(chosen)


@dataclass(frozen=True)
class SpeedPolicy:
    cruise: float = 5.0  # m/s commanded through free space
    min_scale: float = 0.2  # floor of the density-driven slowdown
    window_sectors: int = 3  # half-width of the look-ahead density window

    def __post_init__(self):
        if self.cruise <= 0:
            raise ValidationError("cruise speed must be positive")
        if not 0.0 <= self.min_scale <= 1.0:
            raise ValidationError("min_scale must lie in [0, 1]")
        if self.window_sectors < 0:
            raise ValidationError("window_sectors must be >= 0")


def avoidance_override(setpoint: ControlSetpoint, steering,
                       hist: PolarHistogram, policy: SpeedPolicy) -> ControlSetpoint:
    """Convert a steering decision into a velocity setpoint.

    The commanded speed is the cruise speed scaled down linearly with the
    peak smoothed density within the look-ahead window around the steering
    direction; the original setpoint's altitude is held. STOP yields a
    zero-velocity altitude hold.
    """
    if setpoint.mode == SetpointMode.VELOCITY:
        altitude = setpoint.hold_up
        if altitude is None:
            raise ValidationError("velocity setpoints need hold_up for the override")
    else:
        altitude = setpoint.target[2]
    if steering is STOP:
        return ControlSetpoint.velocity((0.0, 0.0, 0.0), yaw=setpoint.yaw, hold_up=altitude)
    k = hist.sector_of(steering)
    n = hist.sectors
    window = [(k + j) % n for j in range(-policy.window_sectors, policy.window_sectors + 1)]
    peak = float(np.max(hist.density[window]))
    scale = 1.0 - (1.0 - policy.min_scale) * min(peak / hist.threshold, 1.0)
    speed = policy.cruise * scale
    v = (speed * math.cos(steering), speed * math.sin(steering), 0.0)
    return ControlSetpoint.velocity(v, yaw=float(steering), hold_up=altitude)
