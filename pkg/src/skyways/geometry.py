"""Scene geometry: obstacle solids, no-fly zones, segment tests, ray casting.

All containment tests use closed-set semantics: a point exactly on a
boundary counts as inside. That is the conservative choice for safety
checks (a grazing trajectory is treated as a conflict).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .world import LocalPoint, ValidationError

# Slack for boundary classification under float rounding.
_EDGE_EPS = 1e-9


def _vec3(x) -> np.ndarray:
    """Coerce a LocalPoint or any 3-sequence to a float (3,) array."""
    if isinstance(x, LocalPoint):
        return x.as_array()
    v = np.asarray(x, dtype=float)
    if v.shape != (3,):
        raise ValidationError(f"expected a 3-vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("vector components must be finite")
    return v


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center))
        if self.radius <= 0:
            raise ValidationError("sphere radius must be positive")


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box given by min and max corners."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min_corner", _vec3(self.min_corner))
        object.__setattr__(self, "max_corner", _vec3(self.max_corner))
        if not np.all(self.min_corner < self.max_corner):
            raise ValidationError("box min corner must be strictly below max corner componentwise")


@dataclass(frozen=True, eq=False)
class Cylinder:
    """Vertical cylinder; ``center`` is the middle of the base disk."""

    center: np.ndarray
    radius: float
    height: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center))
        if self.radius <= 0:
            raise ValidationError("cylinder radius must be positive")
        if self.height <= 0:
            raise ValidationError("cylinder height must be positive")


Shape = Sphere | Box | Cylinder


@dataclass(eq=False)
class Obstacle:
    id: str
    shape: Shape
    dynamic: bool = False
    velocity: np.ndarray = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.velocity = _vec3(self.velocity)
        if not self.dynamic and np.any(self.velocity != 0.0):
            raise ValidationError(f"static obstacle {self.id} has nonzero velocity")

    def moved(self, dt: float) -> "Obstacle":
        """Obstacle advanced by its own velocity over ``dt`` seconds."""
        if not self.dynamic:
            return self
        d = self.velocity * dt
        s = self.shape
        if isinstance(s, Sphere):
            shape: Shape = Sphere(s.center + d, s.radius)
        elif isinstance(s, Box):
            shape = Box(s.min_corner + d, s.max_corner + d)
        else:
            shape = Cylinder(s.center + d, s.radius, s.height)
        return Obstacle(self.id, shape, self.dynamic, self.velocity)


@dataclass
class NoFlyZone:
    """Convex prism: a CCW polygon footprint between floor and ceiling,
    active over a closed tick window."""

    id: str
    footprint: np.ndarray  # (k, 2) east/north vertices, CCW
    floor: float
    ceiling: float
    active_from: int = 0
    active_until: int | None = None  # inclusive; None = forever

    def __post_init__(self):
        self.footprint = np.asarray(self.footprint, dtype=float)
        if self.footprint.ndim != 2 or self.footprint.shape[0] < 3 or self.footprint.shape[1] != 2:
            raise ValidationError(f"zone {self.id}: footprint must be >=3 (east,north) vertices")
        if self.floor >= self.ceiling:
            raise ValidationError(f"zone {self.id}: floor must be below ceiling")
        if not _is_convex_ccw(self.footprint):
            raise ValidationError(f"zone {self.id}: footprint must be convex and counterclockwise")

    def active_at(self, tick: int) -> bool:
        if tick < self.active_from:
            return False
        return self.active_until is None or tick <= self.active_until


def _is_convex_ccw(poly: np.ndarray) -> bool:
    k = len(poly)
    for i in range(k):
        a, b, c = poly[i], poly[(i + 1) % k], poly[(i + 2) % k]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross < -_EDGE_EPS:
            return False
    return True


# ---------------------------------------------------------------------------
# point / segment containment


def point_in_shape(p: np.ndarray, shape: Shape) -> bool:
    if isinstance(shape, Sphere):
        c = shape.center
        return float(np.dot(p - c, p - c)) <= shape.radius**2
    if isinstance(shape, Box):
        lo, hi = shape.min_corner, shape.max_corner
        return bool(np.all(p >= lo) and np.all(p <= hi))
    c = shape.center
    dx, dy = p[0] - c[0], p[1] - c[1]
    if dx * dx + dy * dy > shape.radius**2:
        return False
    return c[2] <= p[2] <= c[2] + shape.height


def point_in_polygon(pt: np.ndarray, poly: np.ndarray) -> bool:
    """Closed containment test for a convex CCW polygon in the EN plane."""
    k = len(poly)
    for i in range(k):
        a, b = poly[i], poly[(i + 1) % k]
        cross = (b[0] - a[0]) * (pt[1] - a[1]) - (b[1] - a[1]) * (pt[0] - a[0])
        if cross < -_EDGE_EPS:
            return False
    return True


def _segment_param_interval_box(a: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Clip segment a + t*d, t in [0,1] to the slab product; None if empty."""
    t0, t1 = 0.0, 1.0
    for i in range(3):
        if d[i] == 0.0:
            if a[i] < lo[i] or a[i] > hi[i]:
                return None
        else:
            ta = (lo[i] - a[i]) / d[i]
            tb = (hi[i] - a[i]) / d[i]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
            if t0 > t1:
                return None
    return t0, t1


def _segment_param_interval_disk(a2: np.ndarray, d2: np.ndarray, c2: np.ndarray, r: float):
    """Clip segment param range to the 2D disk |a2 + t*d2 - c2| <= r."""
    rel = a2 - c2
    aa = float(np.dot(d2, d2))
    if aa == 0.0:
        if float(np.dot(rel, rel)) <= r * r:
            return 0.0, 1.0
        return None
    bb = 2.0 * float(np.dot(rel, d2))
    cc = float(np.dot(rel, rel)) - r * r
    disc = bb * bb - 4.0 * aa * cc
    if disc < 0.0:
        return None
    sq = math.sqrt(disc)
    t0 = (-bb - sq) / (2.0 * aa)
    t1 = (-bb + sq) / (2.0 * aa)
    t0, t1 = max(t0, 0.0), min(t1, 1.0)
    if t0 > t1:
        return None
    return t0, t1


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    d = b - a
    dd = float(np.dot(d, d))
    if dd == 0.0:
        return float(np.linalg.norm(p - a))
    t = float(np.dot(p - a, d)) / dd
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(a + t * d - p))


def segment_intersects_shape(a: np.ndarray, b: np.ndarray, shape: Shape) -> bool:
    if isinstance(shape, Sphere):
        return point_segment_distance(shape.center, a, b) <= shape.radius
    d = b - a
    if isinstance(shape, Box):
        lo, hi = shape.min_corner, shape.max_corner
        return _segment_param_interval_box(a, d, lo, hi) is not None
    c = shape.center
    iv_disk = _segment_param_interval_disk(a[:2], d[:2], c[:2], shape.radius)
    if iv_disk is None:
        return False
    # vertical slab
    if d[2] == 0.0:
        if not (c[2] <= a[2] <= c[2] + shape.height):
            return False
        tz = (0.0, 1.0)
    else:
        ta = (c[2] - a[2]) / d[2]
        tb = (c[2] + shape.height - a[2]) / d[2]
        if ta > tb:
            ta, tb = tb, ta
        tz = (max(ta, 0.0), min(tb, 1.0))
        if tz[0] > tz[1]:
            return False
    return max(iv_disk[0], tz[0]) <= min(iv_disk[1], tz[1])


def segment_intersects_obstacle(a, b, obs: Obstacle) -> bool:
    """True iff the closed segment a-b meets the closed obstacle solid.

    Degenerate a == b falls back to a point-in-solid test.
    """
    pa, pb = _vec3(a), _vec3(b)
    if np.array_equal(pa, pb):
        return point_in_shape(pa, obs.shape)
    return segment_intersects_shape(pa, pb, obs.shape)


def segment_intersects_polygon_2d(a2: np.ndarray, b2: np.ndarray, poly: np.ndarray) -> bool:
    """Closed intersection of a 2D segment with a convex CCW polygon
    (Cyrus-Beck clipping of the parameter interval by each half-plane)."""
    d = b2 - a2
    t0, t1 = 0.0, 1.0
    k = len(poly)
    for i in range(k):
        va, vb = poly[i], poly[(i + 1) % k]
        # inward normal of a CCW edge
        nx, ny = -(vb[1] - va[1]), vb[0] - va[0]
        denom = nx * d[0] + ny * d[1]
        num = nx * (a2[0] - va[0]) + ny * (a2[1] - va[1])
        if abs(denom) < 1e-15:
            if num < -_EDGE_EPS:
                return False
        else:
            t = -num / denom
            if denom > 0:  # entering
                t0 = max(t0, t)
            else:  # leaving
                t1 = min(t1, t)
            if t0 > t1 + _EDGE_EPS:
                return False
    return True


def segment_intersects_nfz(a, b, zone: NoFlyZone, tick: int) -> bool:
    """True iff the zone is active at the tick, the EN projection of the
    segment meets the footprint, and the altitude span overlaps the
    floor-to-ceiling band. Conjunction of projections, conservative."""
    if not zone.active_at(tick):
        return False
    pa, pb = _vec3(a), _vec3(b)
    lo, hi = min(pa[2], pb[2]), max(pa[2], pb[2])
    if hi < zone.floor or lo > zone.ceiling:
        return False
    return segment_intersects_polygon_2d(pa[:2], pb[:2], zone.footprint)


# ---------------------------------------------------------------------------
# ray casting (shared by the LiDAR model and collision checks)


def ray_ranges(origin: np.ndarray, dirs: np.ndarray, shape: Shape) -> np.ndarray:
    """Entry distance of each unit-direction ray into the solid; inf = miss.

    Rays starting inside the solid report distance 0. Vectorized over the
    (n, 3) direction array.
    """
    n = dirs.shape[0]
    out = np.full(n, np.inf)
    if isinstance(shape, Sphere):
        rel = origin - shape.center
        b = 2.0 * dirs @ rel
        c = float(np.dot(rel, rel)) - shape.radius**2
        disc = b * b - 4.0 * c
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_in = (-b - sq) / 2.0
        t_out = (-b + sq) / 2.0
        hit = ok & (t_out >= 0.0)
        out[hit] = np.maximum(t_in[hit], 0.0)
        return out
    if isinstance(shape, Box):
        lo = shape.min_corner - origin
        hi = shape.max_corner - origin
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = lo / dirs
            tb = hi / dirs
        near = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
        far = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
        # zero direction component: inside slab iff lo <= 0 <= hi
        zero = dirs == 0.0
        inside_slab = (lo <= 0.0) & (hi >= 0.0)
        near = np.where(zero, np.where(inside_slab, -np.inf, np.inf), near)
        far = np.where(zero, np.where(inside_slab, np.inf, -np.inf), far)
        t_in = near.max(axis=1)
        t_out = far.min(axis=1)
        hit = (t_in <= t_out) & (t_out >= 0.0)
        out[hit] = np.maximum(t_in[hit], 0.0)
        return out
    # vertical cylinder: 2D disk interval intersected with z-slab interval
    c = shape.center
    rel2 = origin[:2] - c[:2]
    d2 = dirs[:, :2]
    aa = np.einsum("ij,ij->i", d2, d2)
    bb = 2.0 * d2 @ rel2
    cc = float(np.dot(rel2, rel2)) - shape.radius**2
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = bb * bb - 4.0 * aa * cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        t2_in = (-bb - sq) / (2.0 * aa)
        t2_out = (-bb + sq) / (2.0 * aa)
    vertical = aa == 0.0
    inside_disk = cc <= 0.0
    t2_in = np.where(vertical, np.where(inside_disk, -np.inf, np.inf), t2_in)
    t2_out = np.where(vertical, np.where(inside_disk, np.inf, -np.inf), t2_out)
    miss2 = (~vertical) & (disc < 0.0)
    dz = dirs[:, 2]
    z0 = c[2] - origin[2]
    z1 = c[2] + shape.height - origin[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tz_a = z0 / dz
        tz_b = z1 / dz
    tz_in = np.minimum(tz_a, tz_b)
    tz_out = np.maximum(tz_a, tz_b)
    level = dz == 0.0
    inside_band = (z0 <= 0.0) & (z1 >= 0.0)
    tz_in = np.where(level, np.where(inside_band, -np.inf, np.inf), tz_in)
    tz_out = np.where(level, np.where(inside_band, np.inf, -np.inf), tz_out)
    t_in = np.maximum(t2_in, tz_in)
    t_out = np.minimum(t2_out, tz_out)
    hit = (~miss2) & (t_in <= t_out) & (t_out >= 0.0)
    out[hit] = np.maximum(t_in[hit], 0.0)
    return out


def scene_ray_ranges(origin: np.ndarray, dirs: np.ndarray, shapes: list[Shape]) -> np.ndarray:
    """Nearest entry distance over all shapes for each ray; inf = miss."""
    best = np.full(dirs.shape[0], np.inf)
    for s in shapes:
        np.minimum(best, ray_ranges(origin, dirs, s), out=best)
    return best
