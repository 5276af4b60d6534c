"""Engine-level tests: collision detection against brute-force oracles,
then whole-run behaviour through the public step/run interface."""

import json

import numpy as np
import pytest

from skyways.authority import ApprovalDecision, Verdict
from skyways.control import SetpointMode
from skyways.engine import (
    EngineAbort,
    SimEngine,
    detect_collisions,
    setpoint_from_payload,
    setpoint_to_payload,
)
from skyways.control import ControlSetpoint
from skyways.geometry import Box, Cylinder, Obstacle, Sphere, point_in_shape
from skyways.scenario import load_scenario
from skyways.traffic import PlanState
from skyways.world import LocalPoint


# ---------------------------------------------------------------------------
# collision detection vs oracles


def _oracle_pairs(positions, radii):
    """All-against-all reference for the broad-phase grid."""
    ids = sorted(positions)
    hits = set()
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            if np.linalg.norm(positions[a] - positions[b]) < radii[a] + radii[b]:
                hits.add((a, b))
    return hits


def _grid_pairs(positions, radii, cell=None):
    events = detect_collisions(positions, radii, [], set(), tick=0,
                               cell_size=cell)
    return {e.entities for e in events if e.kind == "uav-uav"}


def test_pair_below_radius_sum_collides():
    pos = {"U1": np.array([0.0, 0.0, 10.0]), "U2": np.array([0.9, 0.0, 10.0])}
    radii = {"U1": 0.5, "U2": 0.5}
    events = detect_collisions(pos, radii, [], set(), tick=7)
    assert len(events) == 1
    assert events[0].kind == "uav-uav"
    assert events[0].entities == ("U1", "U2")
    assert events[0].tick == 7


def test_pair_at_exact_radius_sum_is_clear():
    # the contact condition is strict: touching spheres do not collide
    pos = {"U1": np.zeros(3), "U2": np.array([1.0, 0.0, 0.0])}
    assert detect_collisions(pos, {"U1": 0.5, "U2": 0.5}, [], set(), 0) == []


def test_far_pair_is_clear():
    pos = {"U1": np.zeros(3), "U2": np.array([100.0, 0.0, 0.0])}
    assert detect_collisions(pos, {"U1": 0.5, "U2": 0.5}, [], set(), 0) == []


def test_grid_matches_oracle_on_random_swarms():
    rng = np.random.default_rng(2024)
    for trial in range(200):
        n = int(rng.integers(2, 40))
        ids = [f"U{i}" for i in range(n)]
        spread = float(rng.uniform(3.0, 80.0))
        positions = {u: rng.uniform(-spread, spread, 3) for u in ids}
        radii = {u: float(rng.uniform(0.3, 1.2)) for u in ids}
        assert _grid_pairs(positions, radii) == _oracle_pairs(positions, radii), \
            f"trial {trial} diverged from the all-pairs oracle"


def test_grid_matches_oracle_in_dense_cluster():
    # everything lands in one or two cells; dedup must still hold
    rng = np.random.default_rng(7)
    positions = {f"U{i}": rng.uniform(-1.5, 1.5, 3) for i in range(30)}
    radii = {u: 0.5 for u in positions}
    assert _grid_pairs(positions, radii) == _oracle_pairs(positions, radii)


def test_grid_matches_oracle_with_oversized_cells():
    rng = np.random.default_rng(12)
    positions = {f"U{i}": rng.uniform(-40, 40, 3) for i in range(25)}
    radii = {u: float(rng.uniform(0.3, 1.0)) for u in positions}
    for cell in (None, 5.0, 20.0, 500.0):
        assert _grid_pairs(positions, radii, cell) == _oracle_pairs(positions, radii)


def _ball_hits_shape_sampled(center, r, shape, rng, n=6000):
    """Monte-Carlo oracle: does a ball around center intersect the shape?"""
    if point_in_shape(center, shape):
        return True
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = r * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    pts = center + dirs * radii
    return any(point_in_shape(p, shape) for p in pts)


def test_obstacle_penetration_matches_sampled_oracle():
    shapes = [
        Sphere((0.0, 0.0, 10.0), 4.0),
        Box((-3.0, -3.0, 0.0), (3.0, 3.0, 12.0)),
        Cylinder((5.0, 5.0, 0.0), 2.5, 15.0),
    ]
    rng = np.random.default_rng(99)
    checked = 0
    for shape in shapes:
        obs = Obstacle(f"O-{type(shape).__name__}", shape)
        for _ in range(60):
            p = rng.uniform(-10, 18, 3)
            body = 0.8
            events = detect_collisions({"U1": p}, {"U1": body}, [obs], set(), 0)
            got = any(e.kind == "uav-obstacle" for e in events)
            want = _ball_hits_shape_sampled(p, body, shape, rng)
            if got == want:
                checked += 1
                continue
            # disagreement is only tolerated inside the sampling blur
            events_lo = detect_collisions({"U1": p}, {"U1": body - 0.15},
                                          [obs], set(), 0)
            events_hi = detect_collisions({"U1": p}, {"U1": body + 0.15},
                                          [obs], set(), 0)
            assert any(e.kind == "uav-obstacle" for e in events_hi) != \
                any(e.kind == "uav-obstacle" for e in events_lo), \
                f"clear disagreement at {p} for {type(shape).__name__}"
    assert checked > 120


def test_cylinder_base_is_middle_of_bottom_disk():
    cyl = Obstacle("tower", Cylinder((0.0, 0.0, 10.0), 3.0, 5.0))
    below = detect_collisions({"U1": np.array([0.0, 0.0, 9.4])}, {"U1": 0.5},
                              [cyl], set(), 0)
    assert below == []  # 0.6 m under the base, body 0.5
    touching = detect_collisions({"U1": np.array([0.0, 0.0, 9.6])}, {"U1": 0.5},
                                 [cyl], set(), 0)
    assert any(e.kind == "uav-obstacle" for e in touching)


def test_ground_event_and_landing_exemption():
    pos = {"U1": np.array([5.0, 5.0, -0.05])}
    radii = {"U1": 0.5}
    events = detect_collisions(pos, radii, [], set(), 3)
    assert [e.kind for e in events] == ["uav-ground"]
    assert events[0].entities == ("U1", "ground")
    assert detect_collisions(pos, radii, [], {"U1"}, 3) == []
    above = {"U1": np.array([5.0, 5.0, 0.05])}
    assert detect_collisions(above, radii, [], set(), 3) == []


# ---------------------------------------------------------------------------
# setpoint wire format


def test_setpoint_payload_round_trip():
    cases = [
        ControlSetpoint.hold(LocalPoint(1.0, 2.0, 3.0), yaw=0.4),
        ControlSetpoint.waypoint(LocalPoint(-5.0, 8.0, 30.0), yaw=1.2,
                                 speed_limit=4.5),
        ControlSetpoint.velocity((2.0, -1.0, 0.0), yaw=0.1, hold_up=25.0),
    ]
    for sp in cases:
        back = setpoint_from_payload(setpoint_to_payload(sp))
        assert back.mode is sp.mode
        assert back.target == sp.target
        assert back.yaw == sp.yaw
        assert back.hold_up == sp.hold_up
        assert back.speed_limit == sp.speed_limit


# ---------------------------------------------------------------------------
# scenario fixtures


def _doc(demands, *, fleet=None, anomalies=(), obstacles=(), seed=11,
         length=200.0, alt=30.0):
    return {
        "datum": {"lat": 31.0, "lon": 121.0, "alt": 0.0},
        "map": {"name": "mini", "obstacles": list(obstacles), "zones": []},
        "network": {
            "nodes": [
                {"id": "N0", "position": [0, 0, alt]},
                {"id": "N1", "position": [length, 0, alt]},
            ],
            "airports": [
                {"id": "A0", "position": [0, 0, 0], "linked_node": "N0"},
                {"id": "A1", "position": [length, 0, 0], "linked_node": "N1"},
            ],
            "airways": [{"id": "W01", "a": "N0", "b": "N1"}],
        },
        "fleet": fleet if fleet is not None else [
            {"id": "U1", "home": "A0"},
            {"id": "U2", "home": "A1"},
        ],
        "demands": demands,
        "anomalies": list(anomalies),
        "seed": seed,
        "clock": {},
        "wind": [0.0, 0.0, 0.0],
    }


def _detour_doc(seed=5):
    """Two-hop direct path plus a longer bypass through N2."""
    alt = 30.0
    return {
        "datum": {"lat": 31.0, "lon": 121.0, "alt": 0.0},
        "map": {"name": "detour", "obstacles": [], "zones": []},
        "network": {
            "nodes": [
                {"id": "N0", "position": [0, 0, alt]},
                {"id": "NM", "position": [100, 0, alt]},
                {"id": "N1", "position": [200, 0, alt]},
                {"id": "N2", "position": [100, 125, alt]},
            ],
            "airports": [
                {"id": "A0", "position": [0, 0, 0], "linked_node": "N0"},
                {"id": "A1", "position": [200, 0, 0], "linked_node": "N1"},
            ],
            "airways": [
                {"id": "D1", "a": "N0", "b": "NM"},
                {"id": "D2", "a": "NM", "b": "N1"},
                {"id": "U", "a": "N0", "b": "N2"},
                {"id": "V", "a": "N2", "b": "N1"},
            ],
        },
        "fleet": [{"id": "U1", "home": "A0"}],
        "demands": [{"id": "D1", "origin": "A0", "destination": "A1",
                     "departure": 10}],
        "anomalies": [],
        "seed": seed,
        "clock": {},
        "wind": [0.0, 0.0, 0.0],
    }


# ---------------------------------------------------------------------------
# whole runs


def test_empty_scenario_terminates_immediately():
    eng = SimEngine(load_scenario(_doc([])))
    report = eng.run()
    assert report.ticks == 0
    assert report.counts == {"total": 0, "completed": 0, "aborted": 0,
                             "active": 0}
    assert report.error is None


def test_single_mission_completes(tmp_path):
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 30}])
    eng = SimEngine(load_scenario(doc), out_dir=tmp_path)
    report = eng.run(until=5000)

    assert report.counts["completed"] == 1
    assert report.collisions == []
    mission = report.missions[0]
    assert mission["state"] == "completed"
    assert mission["uav_id"] == "U1"
    states = [s for _, s, _ in eng.traffic.plans["P-D1"].history]
    assert states == ["submitted", "approved", "taking-off", "enroute",
                      "landing", "completed"]
    # the flight transited the single airway exactly once
    assert report.stats["airways"]["W01"]["transits"] == 1
    assert report.stats["airports"]["A0"]["departures"] == 1
    assert report.stats["airports"]["A1"]["arrivals"] == 1

    telemetry = (tmp_path / "telemetry.jsonl").read_text().splitlines()
    assert telemetry
    first = json.loads(telemetry[0])
    assert first["uav_id"] == "U1"
    assert len(first["position"]) == 3
    events = [json.loads(line)
              for line in (tmp_path / "events.jsonl").read_text().splitlines()]
    kinds = {e["kind"] for e in events}
    assert {"lifecycle", "decision", "spawn", "reclaim"} <= kinds
    assert json.loads((tmp_path / "report.json").read_text())["counts"][
        "completed"] == 1
    assert (tmp_path / "stats.json").exists()


def test_entities_track_in_flight_plans():
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 20}])
    eng = SimEngine(load_scenario(doc))
    saw_entity = False
    for _ in range(5000):
        if eng.done():
            break
        eng.step()
        in_flight = sum(1 for p in eng.traffic.plans.values()
                        if p.state in (PlanState.TAKING_OFF, PlanState.ENROUTE,
                                       PlanState.LANDING))
        assert len(eng.states) == in_flight
        saw_entity = saw_entity or in_flight > 0
    assert eng.done() and saw_entity
    assert eng.states == {}


def test_audit_catches_entity_leak():
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 10}])
    eng = SimEngine(load_scenario(doc))
    for _ in range(5000):
        eng.step()
        if eng.traffic.plans["P-D1"].state is PlanState.ENROUTE:
            break
    assert eng.states, "vehicle never went enroute"
    eng.states.pop(next(iter(eng.states)))
    with pytest.raises(EngineAbort):
        eng.step()


def test_head_on_collision_aborts_both():
    # zero lane offset plus opposing traffic forces a mid-span conflict
    doc = _doc([
        {"id": "D1", "origin": "A0", "destination": "A1", "departure": 30},
        {"id": "D2", "origin": "A1", "destination": "A0", "departure": 30},
    ])
    from skyways.traffic import TrafficConfig
    eng = SimEngine(load_scenario(doc),
                    traffic_config=TrafficConfig(lane_offset=0.0))
    report = eng.run(until=6000)
    assert report.counts["aborted"] == 2
    assert any(c["kind"] == "uav-uav" for c in report.collisions)
    assert report.stats["collisions"] >= 1
    for mission in report.missions:
        assert mission["reason"] == "collision"
    assert eng.states == {}


def test_lane_offset_prevents_head_on():
    doc = _doc([
        {"id": "D1", "origin": "A0", "destination": "A1", "departure": 30},
        {"id": "D2", "origin": "A1", "destination": "A0", "departure": 30},
    ])
    report = SimEngine(load_scenario(doc)).run(until=8000)
    assert report.collisions == []
    assert report.counts["completed"] == 2


def test_runs_are_byte_identical(tmp_path):
    doc = _doc([
        {"id": "D1", "origin": "A0", "destination": "A1", "departure": 30},
        {"id": "D2", "origin": "A1", "destination": "A0", "departure": 90},
    ])
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        eng = SimEngine(load_scenario(doc), out_dir=out)
        reports.append(eng.run(until=8000))
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "telemetry.jsonl").read_bytes() == (b / "telemetry.jsonl").read_bytes()
    assert (a / "events.jsonl").read_bytes() == (b / "events.jsonl").read_bytes()
    assert reports[0].deterministic_payload() == reports[1].deterministic_payload()
    payload = reports[0].to_payload()
    det = reports[0].deterministic_payload()
    assert "wall_seconds" in payload and "wall_seconds" not in det
    assert "ticks_per_second" not in det and "log_dir" not in det


def test_obstacle_on_route_is_avoided():
    # a fat sphere sits dead center on the corridor at cruise altitude;
    # widened steering margins buy clearance beyond the geometric tangent
    from skyways.avoidance import HistogramConfig
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 20}],
               obstacles=[{"id": "balloon", "shape": {
                   "type": "sphere", "center": [100.0, 0.0, 18.0],
                   "radius": 3.0}}],
               alt=18.0)
    eng = SimEngine(load_scenario(doc), s_max=12,
                    histogram_config=HistogramConfig(threshold=8.0))
    report = eng.run(until=8000)
    assert report.collisions == []
    assert report.counts["completed"] == 1


def test_rotor_loss_crashes_into_ground_event():
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 20}],
               anomalies=[{"id": "BRK", "category": "uav",
                           "kind": "propeller_breakage",
                           "params": {"uav": "U1", "motor": 2},
                           "onset": 500}])
    eng = SimEngine(load_scenario(doc))
    report = eng.run(until=6000)
    assert any(c["kind"] == "uav-ground" and c["entities"][0] == "U1"
               for c in report.collisions)
    assert report.missions[0]["state"] == "aborted"
    assert report.missions[0]["reason"] == "collision"
    assert eng.done()


def test_wind_gust_applies_then_reverts():
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 20}],
               anomalies=[{"id": "GUST", "category": "environment",
                           "kind": "wind_gust",
                           "params": {"vector": [2.0, 0.0, 0.0]},
                           "onset": 300, "duration": 60}])
    eng = SimEngine(load_scenario(doc))
    seen_on = seen_off = False
    for _ in range(6000):
        if eng.done():
            break
        eng.step()
        if eng.clock.tick == 330:
            seen_on = eng.hooks.wind[0] == pytest.approx(2.0)
        if eng.clock.tick == 400:
            seen_off = eng.hooks.wind[0] == pytest.approx(0.0)
    assert seen_on and seen_off
    assert eng.traffic.plans["P-D1"].state is PlanState.COMPLETED


def test_live_airway_closure_forces_replan():
    eng = SimEngine(load_scenario(_detour_doc()))
    injected = False
    for _ in range(10000):
        if eng.done():
            break
        plan = eng.traffic.plans["P-D1"]
        if not injected and plan.state is PlanState.ENROUTE:
            eng.inject_anomaly_live({
                "id": "CLS", "category": "control", "kind": "close_airway",
                "params": {"target": "D2"}})
            injected = True
        eng.step()
    plan = eng.traffic.plans["P-D1"]
    assert injected
    assert plan.state is PlanState.COMPLETED
    assert "D2" in eng.authority.closed_airways
    assert "V" in plan.route.airways  # finished over the bypass
    assert any("replanned via" in detail for _, _, detail in plan.history)


def test_external_decider_reproduces_builtin_run():
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 30},
                {"id": "D2", "origin": "A1", "destination": "A0",
                 "departure": 60}])
    builtin = SimEngine(load_scenario(doc)).run(until=8000)

    def echo_approve(submissions, now):
        return [ApprovalDecision(s.plan_id, Verdict.APPROVED,
                                 assigned_departure=max(s.requested_departure,
                                                        now + 1))
                for s in submissions]

    eng = SimEngine(load_scenario(doc))
    eng.external_decider = echo_approve
    swapped = eng.run(until=8000)
    assert swapped.deterministic_payload() == builtin.deterministic_payload()


def test_external_decider_timeout_aborts_run():
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 10}])
    eng = SimEngine(load_scenario(doc))

    def broken(submissions, now):
        raise TimeoutError("no answer")

    eng.external_decider = broken
    report = eng.run(until=3000)
    assert report.error == "external timeout"
