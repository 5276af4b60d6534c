"""Solid shapes, no-fly zones, and intersection predicates.

Boundary contact counts as inside everywhere (closed sets), so the grazing
and on-edge cases below assert True.
"""

import math

import numpy as np
import pytest

from skyways.geometry import (
    Box,
    Cylinder,
    NoFlyZone,
    Obstacle,
    Sphere,
    point_in_polygon,
    point_in_shape,
    point_segment_distance,
    ray_ranges,
    scene_ray_ranges,
    segment_intersects_nfz,
    segment_intersects_obstacle,
    segment_intersects_polygon_2d,
    segment_intersects_shape,
)
from skyways.world import ValidationError


def _p(*xyz):
    return np.array(xyz, dtype=float)


# --- point-segment distance oracle used below ---

def _brute_segment_distance(p, a, b, samples=200_001):
    t = np.linspace(0.0, 1.0, samples)
    pts = a[None, :] + t[:, None] * (b - a)[None, :]
    return float(np.min(np.linalg.norm(pts - p[None, :], axis=1)))


def test_point_segment_distance_matches_dense_sampling():
    rng = np.random.default_rng(5)
    for _ in range(50):
        p, a, b = (rng.uniform(-10, 10, 3) for _ in range(3))
        exact = point_segment_distance(p, a, b)
        approx = _brute_segment_distance(p, a, b, samples=20_001)
        assert exact <= approx + 1e-9
        assert exact == pytest.approx(approx, abs=1e-3)


def test_segment_through_sphere_center():
    s = Sphere(center=_p(5, 0, 0), radius=1.0)
    assert segment_intersects_shape(_p(0, 0, 0), _p(10, 0, 0), s)


def test_segment_misses_offset_sphere():
    s = Sphere(center=_p(5, 5, 0), radius=1.0)
    assert not segment_intersects_shape(_p(0, 0, 0), _p(10, 0, 0), s)


def test_segment_grazing_sphere_at_exact_tangent():
    # tangent: centerline passes at distance exactly equal to the radius
    r = 1.25
    s = Sphere(center=_p(5.0, r, 0.0), radius=r)
    a, b = _p(0, 0, 0), _p(10, 0, 0)
    assert point_segment_distance(s.center, a, b) == r
    assert segment_intersects_shape(a, b, s)


def test_sphere_just_beyond_tangent_is_missed():
    r = 1.25
    s = Sphere(center=_p(5.0, r + 1e-6, 0.0), radius=r)
    assert not segment_intersects_shape(_p(0, 0, 0), _p(10, 0, 0), s)


class TestShapeValidation:
    def test_sphere_radius_positive(self):
        with pytest.raises(ValidationError):
            Sphere(center=_p(0, 0, 0), radius=0.0)

    def test_box_corners_strictly_ordered(self):
        with pytest.raises(ValidationError):
            Box(min_corner=_p(0, 0, 0), max_corner=_p(1, 0, 1))

    def test_cylinder_dims_positive(self):
        with pytest.raises(ValidationError):
            Cylinder(center=_p(0, 0, 0), radius=1.0, height=0.0)


class TestPointInShape:
    def test_sphere_boundary_is_inside(self):
        s = Sphere(center=_p(0, 0, 0), radius=2.0)
        assert point_in_shape(_p(2, 0, 0), s)
        assert point_in_shape(_p(0, 0, 0), s)
        assert not point_in_shape(_p(2.001, 0, 0), s)

    def test_box(self):
        b = Box(min_corner=_p(0, 0, 0), max_corner=_p(1, 2, 3))
        assert point_in_shape(_p(0, 0, 0), b)
        assert point_in_shape(_p(1, 2, 3), b)
        assert point_in_shape(_p(0.5, 1, 1.5), b)
        assert not point_in_shape(_p(1.01, 1, 1), b)

    def test_cylinder_center_is_base_middle(self):
        c = Cylinder(center=_p(0, 0, 0), radius=1.0, height=4.0)
        assert point_in_shape(_p(1, 0, 0), c)
        assert point_in_shape(_p(0, 0, 4), c)
        assert not point_in_shape(_p(0, 0, 4.01), c)
        assert not point_in_shape(_p(0, 0, -0.01), c)


SQUARE = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]])


class TestNoFlyZone:
    def test_segment_entirely_above_ceiling(self):
        z = NoFlyZone("z1", SQUARE, floor=0.0, ceiling=50.0, active_from=0)
        assert not segment_intersects_nfz(_p(1, 1, 60), _p(3, 3, 55), z, tick=10)

    def test_segment_crossing_interior_inside_window(self):
        z = NoFlyZone("z1", SQUARE, floor=0.0, ceiling=50.0, active_from=0, active_until=100)
        assert segment_intersects_nfz(_p(-1, 2, 25), _p(5, 2, 25), z, tick=100)

    def test_endpoint_exactly_on_polygon_edge(self):
        # closed zone: the boundary itself is in the zone
        z = NoFlyZone("z1", SQUARE, floor=0.0, ceiling=50.0, active_from=0)
        assert point_in_polygon(np.array([2.0, 0.0]), SQUARE)
        assert segment_intersects_nfz(_p(2, 0, 25), _p(2, -5, 25), z, tick=0)

    def test_inactive_window(self):
        z = NoFlyZone("z1", SQUARE, floor=0.0, ceiling=50.0, active_from=10, active_until=20)
        seg = (_p(-1, 2, 25), _p(5, 2, 25))
        assert not segment_intersects_nfz(*seg, z, tick=9)
        assert segment_intersects_nfz(*seg, z, tick=10)
        assert segment_intersects_nfz(*seg, z, tick=20)
        assert not segment_intersects_nfz(*seg, z, tick=21)

    def test_open_ended_window(self):
        z = NoFlyZone("z1", SQUARE, floor=0.0, ceiling=50.0, active_from=5, active_until=None)
        assert z.active_at(5) and z.active_at(10**9)

    def test_polygon_must_be_convex_ccw(self):
        bad = np.array([[0.0, 0.0], [0.0, 4.0], [4.0, 4.0], [4.0, 0.0]])  # clockwise
        with pytest.raises(ValidationError):
            NoFlyZone("z", bad, floor=0.0, ceiling=10.0, active_from=0)

    def test_altitude_overlap_is_conjunctive(self):
        z = NoFlyZone("z1", SQUARE, floor=10.0, ceiling=20.0, active_from=0)
        # crosses footprint but below the floor
        assert not segment_intersects_nfz(_p(-1, 2, 5), _p(5, 2, 5), z, tick=0)
        # clips the floor exactly
        assert segment_intersects_nfz(_p(-1, 2, 10), _p(5, 2, 10), z, tick=0)


def test_segment_polygon_2d_cases():
    assert segment_intersects_polygon_2d(np.array([-1.0, 2.0]), np.array([5.0, 2.0]), SQUARE)
    assert segment_intersects_polygon_2d(np.array([2.0, 2.0]), np.array([2.0, 2.0]), SQUARE)
    assert not segment_intersects_polygon_2d(np.array([-1.0, -1.0]), np.array([5.0, -1.0]), SQUARE)
    # touching a corner counts (closed)
    assert segment_intersects_polygon_2d(np.array([-1.0, 1.0]), np.array([1.0, -1.0]), SQUARE)


def _random_shape(rng):
    kind = rng.integers(0, 3)
    c = rng.uniform(-8, 8, 3)
    if kind == 0:
        return Sphere(center=c, radius=float(rng.uniform(0.5, 3)))
    if kind == 1:
        ext = rng.uniform(0.5, 4, 3)
        return Box(min_corner=c - ext, max_corner=c + ext)
    return Cylinder(center=c, radius=float(rng.uniform(0.5, 3)), height=float(rng.uniform(0.5, 6)))


def _dense_hit(a, b, shape, samples=4001):
    t = np.linspace(0.0, 1.0, samples)
    pts = a[None, :] + t[:, None] * (b - a)[None, :]
    return any(point_in_shape(p, shape) for p in pts)


def test_segment_shape_agreement_with_dense_sampling():
    # dual route: dense point sampling vs the closed-form predicate.
    # Near-tangent cases are excluded by a guard band, not by loosening the
    # predicate itself.
    rng = np.random.default_rng(99)
    checked = 0
    for _ in range(400):
        shape = _random_shape(rng)
        a, b = rng.uniform(-12, 12, 3), rng.uniform(-12, 12, 3)
        exact = segment_intersects_shape(a, b, shape)
        sampled = _dense_hit(a, b, shape)
        if sampled:
            assert exact, f"sampler found a hit the predicate missed: {shape}"
            checked += 1
        elif not exact:
            checked += 1
        # predicate-true but sampler-miss can only be a thin graze; verify by
        # refining the sampling before accepting
        elif _dense_hit(a, b, shape, samples=400_001):
            checked += 1
        # else: sub-resolution graze, skip
    assert checked >= 380


def test_degenerate_segment_is_point_test():
    s = Sphere(center=_p(0, 0, 0), radius=1.0)
    assert segment_intersects_shape(_p(1, 0, 0), _p(1, 0, 0), s)
    assert not segment_intersects_shape(_p(1.1, 0, 0), _p(1.1, 0, 0), s)


class TestObstacle:
    def test_static_obstacle_does_not_move(self):
        o = Obstacle("o1", Sphere(center=_p(0, 0, 0), radius=1.0), dynamic=False)
        assert np.array_equal(o.moved(10.0).shape.center, o.shape.center)

    def test_dynamic_obstacle_advances_linearly(self):
        o = Obstacle("o2", Sphere(center=_p(0, 0, 0), radius=1.0), dynamic=True,
                     velocity=np.array([1.0, 2.0, 0.0]))
        m = o.moved(2.0)
        assert np.allclose(m.shape.center, [2.0, 4.0, 0.0])

    def test_segment_vs_obstacle(self):
        o = Obstacle("o3", Sphere(center=_p(5, 0, 0), radius=1.0), dynamic=False)
        assert segment_intersects_obstacle(_p(0, 0, 0), _p(10, 0, 0), o)


class TestRayRanges:
    def test_boresight_sphere_entry_distance(self):
        s = Sphere(center=_p(10, 0, 0), radius=1.0)
        d = ray_ranges(_p(0, 0, 0), np.array([[1.0, 0.0, 0.0]]), s)
        assert d[0] == pytest.approx(9.0, abs=1e-9)

    def test_miss_is_inf_and_inside_is_zero(self):
        s = Sphere(center=_p(10, 0, 0), radius=1.0)
        d = ray_ranges(_p(0, 0, 0), np.array([[0.0, 1.0, 0.0]]), s)
        assert d[0] == math.inf
        d = ray_ranges(_p(10, 0, 0), np.array([[1.0, 0.0, 0.0]]), s)
        assert d[0] == 0.0

    def test_box_and_cylinder_entries(self):
        b = Box(min_corner=_p(4, -1, -1), max_corner=_p(6, 1, 1))
        d = ray_ranges(_p(0, 0, 0), np.array([[1.0, 0.0, 0.0]]), b)
        assert d[0] == pytest.approx(4.0, abs=1e-12)
        c = Cylinder(center=_p(8, 0, -2), radius=2.0, height=4.0)
        d = ray_ranges(_p(0, 0, 0), np.array([[1.0, 0.0, 0.0]]), c)
        assert d[0] == pytest.approx(6.0, abs=1e-12)

    def test_ranges_match_marching_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(60):
            shape = _random_shape(rng)
            origin = rng.uniform(-15, 15, 3)
            if point_in_shape(origin, shape):
                continue
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            d = float(ray_ranges(origin, v[None, :], shape)[0])
            ts = np.linspace(0.0, 40.0, 80_001)
            hits = [t for t in ts if point_in_shape(origin + t * v, shape)]
            if hits:
                assert d == pytest.approx(hits[0], abs=2e-3)
            elif math.isfinite(d):
                assert d > 40.0 or d == pytest.approx(min(hits, default=d), abs=2e-3) \
                    or _near_graze(origin, v, shape, d)
            # both report a miss: agreement

    def test_scene_min_over_shapes(self):
        shapes = [Sphere(center=_p(10, 0, 0), radius=1.0),
                  Sphere(center=_p(5, 0, 0), radius=0.5)]
        d = scene_ray_ranges(_p(0, 0, 0), np.array([[1.0, 0.0, 0.0]]), shapes)
        assert d[0] == pytest.approx(4.5, abs=1e-9)


def _near_graze(origin, v, shape, d):
    # accept a predicate hit the marching oracle missed only if the hit point
    # sits within sampling slack of the surface
    p = origin + d * v
    for eps in (1e-4, -1e-4):
        if point_in_shape(p + eps * v, shape):
            return True
    return point_in_shape(p, shape)
