"""Coordinate frames, simulation clock and seeded randomness.

Local coordinates are ENU (east, north, up) meters in a right-handed frame
tangent to the WGS-84 ellipsoid at the scenario datum. The tangent-plane
approximation is accurate to well under a millimeter for scenario extents
up to ~20 km; earth curvature beyond that is out of scope.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

# WGS-84 ellipsoid
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class LocalPoint:
    """A point in the local ENU frame, meters from the scenario datum."""

    east: float
    north: float
    up: float

    def __post_init__(self):
        if not (math.isfinite(self.east) and math.isfinite(self.north) and math.isfinite(self.up)):
            raise ValidationError(f"non-finite LocalPoint: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.east, self.north, self.up], dtype=float)

    @staticmethod
    def from_array(a) -> "LocalPoint":
        return LocalPoint(float(a[0]), float(a[1]), float(a[2]))

    def distance_to(self, other: "LocalPoint") -> float:
        return math.sqrt(
            (self.east - other.east) ** 2
            + (self.north - other.north) ** 2
            + (self.up - other.up) ** 2
        )


@dataclass(frozen=True)
class GeodeticPoint:
    """WGS-84 latitude/longitude in degrees, altitude in meters."""

    lat: float
    lon: float
    alt: float = 0.0

    def __post_init__(self):
        if abs(self.lat) > 90.0:
            raise ValidationError(f"latitude out of range: {self.lat}")
        if abs(self.lon) > 180.0:
            raise ValidationError(f"longitude out of range: {self.lon}")


def _radii(lat_deg: float) -> tuple[float, float]:
    """Meridional and prime-vertical curvature radii at a latitude."""
    s2 = math.sin(math.radians(lat_deg)) ** 2
    w = math.sqrt(1.0 - WGS84_E2 * s2)
    meridional = WGS84_A * (1.0 - WGS84_E2) / w**3
    prime_vertical = WGS84_A / w
    return meridional, prime_vertical


def geodetic_to_local(lat: float, lon: float, alt: float, datum: GeodeticPoint) -> LocalPoint:
    """Project a geodetic point onto the ENU tangent plane about ``datum``.

    The projection is affine in (lat, lon, alt), so :func:`local_to_geodetic`
    inverts it exactly up to float rounding.
    """
    if abs(lat) > 90.0:
        raise ValidationError(f"latitude out of range: {lat}")
    if abs(lon) > 180.0:
        raise ValidationError(f"longitude out of range: {lon}")
    m, n = _radii(datum.lat)
    north = math.radians(lat - datum.lat) * (m + datum.alt)
    east = math.radians(lon - datum.lon) * (n + datum.alt) * math.cos(math.radians(datum.lat))
    return LocalPoint(east, north, alt - datum.alt)


def local_to_geodetic(p: LocalPoint, datum: GeodeticPoint) -> GeodeticPoint:
    """Inverse of :func:`geodetic_to_local` about the same datum."""
    m, n = _radii(datum.lat)
    lat = datum.lat + math.degrees(p.north / (m + datum.alt))
    lon = datum.lon + math.degrees(p.east / ((n + datum.alt) * math.cos(math.radians(datum.lat))))
    return GeodeticPoint(lat, lon, p.up + datum.alt)


@dataclass
class SimClock:
    """Integer-tick simulation clock.

    Elapsed time is always derived from the integer tick count, never
    accumulated in floats, so two runs of equal length agree exactly.
    """

    tick_duration: float = 1.0 / 30.0
    physics_substeps: int = 8
    tick: int = 0

    def __post_init__(self):
        if self.tick_duration <= 0:
            raise ValidationError("tick_duration must be positive")
        if self.physics_substeps < 1:
            raise ValidationError("physics_substeps must be >= 1")
        if self.tick < 0:
            raise ValidationError("tick must be non-negative")

    @property
    def physics_dt(self) -> float:
        return self.tick_duration / self.physics_substeps

    @property
    def elapsed(self) -> float:
        return self.tick * self.tick_duration

    def advance(self) -> int:
        self.tick += 1
        return self.tick


class RandomStream:
    """Deterministic, subsystem-keyed random stream.

    Two streams built from the same (seed, key) produce identical draws;
    distinct keys give independent sequences. All run randomness must come
    from streams derived from the single scenario seed, so that replay is
    exact regardless of module initialization order.
    """

    def __init__(self, seed: int, key: str):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = key
        digest = hashlib.sha256(f"{self.seed}:{key}".encode()).digest()
        self._rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._rng.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high] inclusive."""
        return self._rng.integers(low, high, size, endpoint=True)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._rng.normal(loc, scale, size)

    def bytes(self, n: int) -> bytes:
        return self._rng.bytes(n)

    def spawn(self, subkey: str) -> "RandomStream":
        return RandomStream(self.seed, f"{self.key}/{subkey}")
