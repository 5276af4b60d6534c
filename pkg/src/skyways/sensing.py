"""Geometric LiDAR: one ray per (channel, azimuth step) against scene solids.

Sensor frame equals the FLU body frame: boresight +x, azimuth measured
counterclockwise about +z from +x, elevation from the horizontal plane.
Scans are deterministic; weather effects (dropout, range noise) are opt-in
arguments driven by the anomaly layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import quat
from .geometry import Shape, scene_ray_ranges
from .world import RandomStream, ValidationError


@dataclass(frozen=True)
class LidarConfig:
    channels: int = 12
    vertical_fov: tuple[float, float] = (-5.0, 5.0)  # degrees
    horizontal_fov: tuple[float, float] = (0.0, 360.0)  # [start, end) degrees
    horizontal_resolution: float = 2.0  # degrees per ray
    max_range: float = 20.0
    scan_rate: float = 1.0  # full scans per control period

    def __post_init__(self):
        if self.channels < 1:
            raise ValidationError("lidar needs at least one channel")
        lo, hi = self.vertical_fov
        if not lo < hi:
            raise ValidationError("vertical fov must satisfy min < max")
        h0, h1 = self.horizontal_fov
        if not (0.0 <= h0 < h1 <= 360.0):
            raise ValidationError("horizontal fov must lie within [0, 360]")
        if self.horizontal_resolution <= 0:
            raise ValidationError("horizontal resolution must be positive")
        steps = 360.0 / self.horizontal_resolution
        if abs(steps - round(steps)) > 1e-9:
            raise ValidationError("horizontal resolution must divide 360 evenly")
        if self.max_range <= 0:
            raise ValidationError("max range must be positive")
        if self.scan_rate <= 0:
            raise ValidationError("scan rate must be positive")

    @property
    def azimuth_steps(self) -> int:
        h0, h1 = self.horizontal_fov
        return max(1, int(math.ceil((h1 - h0) / self.horizontal_resolution - 1e-9)))

    def elevations(self) -> np.ndarray:
        """Channel elevation angles in radians, evenly spaced min..max."""
        lo, hi = self.vertical_fov
        return np.radians(np.linspace(lo, hi, self.channels))

    def azimuths(self) -> np.ndarray:
        """Ray azimuths in radians: start of the arc, stepping by the
        resolution, end exclusive."""
        h0 = self.horizontal_fov[0]
        return np.radians(h0 + np.arange(self.azimuth_steps) * self.horizontal_resolution)

    def ray_directions(self) -> np.ndarray:
        """Unit directions in the sensor frame, shape (channels*steps, 3);
        azimuth varies fastest."""
        el = self.elevations()[:, None]
        az = self.azimuths()[None, :]
        ce = np.cos(el)
        d = np.empty((self.channels, self.azimuth_steps, 3))
        d[:, :, 0] = ce * np.cos(az)
        d[:, :, 1] = ce * np.sin(az)
        d[:, :, 2] = np.broadcast_to(np.sin(el), d.shape[:2])
        return d.reshape(-1, 3)


@dataclass(frozen=True)
class PointCloud:
    """Hit returns only; misses are omitted rather than carrying sentinels."""

    ranges: np.ndarray  # (k,)
    azimuths: np.ndarray  # (k,) radians, sensor frame
    elevations: np.ndarray  # (k,) radians, sensor frame
    scan_tick: int

    def __len__(self) -> int:
        return int(self.ranges.shape[0])

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.ranges.tolist(), self.azimuths.tolist(),
                        self.elevations.tolist()))


def scan_lidar(position: np.ndarray, attitude: np.ndarray, config: LidarConfig,
               shapes: list[Shape], scan_tick: int,
               dropout: float = 0.0, range_noise: float = 0.0,
               rng: RandomStream | None = None) -> PointCloud:
    """Cast the full scan pattern from a world pose and collect hits.

    dropout discards each hit independently with the given probability and
    range_noise adds zero-mean gaussian error; both need an rng and model
    degraded weather. Returned ranges lie in (0, max_range].
    """
    if (dropout > 0.0 or range_noise > 0.0) and rng is None:
        raise ValidationError("noisy scans need a random stream")
    dirs_body = config.ray_directions()
    if not shapes:
        empty = np.empty(0)
        return PointCloud(empty, empty.copy(), empty.copy(), scan_tick)
    dirs_world = quat.rotate(np.broadcast_to(attitude, (dirs_body.shape[0], 4)), dirs_body)
    dist = scene_ray_ranges(np.asarray(position, dtype=float), dirs_world, shapes)

    az = np.tile(config.azimuths(), config.channels)
    el = np.repeat(config.elevations(), config.azimuth_steps)
    hit = (dist > 0.0) & (dist <= config.max_range)
    r, a, e = dist[hit], az[hit], el[hit]
    if range_noise > 0.0 and r.size:
        r = r + rng.normal(0.0, range_noise, size=r.shape)
        keep = (r > 0.0) & (r <= config.max_range)
        r, a, e = r[keep], a[keep], e[keep]
    if dropout > 0.0 and r.size:
        keep = rng.uniform(size=r.shape) >= dropout
        r, a, e = r[keep], a[keep], e[keep]
    return PointCloud(r, a, e, scan_tick)
