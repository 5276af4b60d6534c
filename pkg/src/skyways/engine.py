"""Tick-ordered simulation core: one loop that owns every subsystem.

The phase order inside a tick is fixed: deliver bus messages, inject
anomalies, authority step, traffic step, spawn/reclaim, per-vehicle
sensing/guidance/physics, collision detection, statistics, telemetry,
log flush. Determinism comes from that order plus keyed random streams;
wall-clock time never influences simulation state.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import quat
from .anomaly import AnomalyInjector, FogState, WorldHooks
from .authority import (
    AirspaceAuthority,
    ApprovalDecision,
    ApprovalPolicy,
    ControlOrder,
    PlanSubmission,
    TelemetrySample,
    TrafficStats,
)
from .avoidance import (
    STOP,
    HistogramConfig,
    SpeedPolicy,
    avoidance_override,
    build_histogram,
    select_heading,
)
from .bus import LinkModel, MessageBus
from .control import ControlGains, ControlSetpoint, FleetController, SetpointMode
from .dynamics import FleetDynamics, UavState
from .geometry import Box, Cylinder, Obstacle, Shape, Sphere
from .scenario import Scenario
from .sensing import LidarConfig, PointCloud, scan_lidar
from .traffic import FlightDemand, PlanState, TrafficConfig, TrafficManager
from .world import LocalPoint, RandomStream, ValidationError

# prefixes the engine itself routes traffic over; sized so that a nominal
# run never queues or drops (anomalies may replace these models live)
_INTERNAL_PREFIXES = ("plan", "uav", "control", "airspace", "anomaly", "stats")
_WIDE_OPEN = LinkModel(queue_capacity=1_000_000, service_rate=1_000_000)

_IN_FLIGHT = (PlanState.TAKING_OFF, PlanState.ENROUTE, PlanState.LANDING)


class EngineAbort(RuntimeError):
    """Raised when a run cannot continue (e.g. external decider timeout)."""


# ---------------------------------------------------------------------------
# collision detection


@dataclass(frozen=True)
class CollisionEvent:
    tick: int
    kind: str  # uav-uav | uav-obstacle | uav-ground
    entities: tuple[str, str]
    positions: tuple[tuple[float, float, float], ...]

    def to_payload(self) -> dict:
        return {
            "tick": self.tick,
            "kind": self.kind,
            "entities": list(self.entities),
            "positions": [list(p) for p in self.positions],
        }


def _shape_clearance(p: np.ndarray, shape: Shape) -> float:
    """Signed distance from a point to a shape's surface (negative inside)."""
    if isinstance(shape, Sphere):
        return float(np.linalg.norm(p - shape.center)) - shape.radius
    if isinstance(shape, Box):
        lo, hi = shape.min_corner, shape.max_corner
        clamped = np.minimum(np.maximum(p, lo), hi)
        outside = float(np.linalg.norm(p - clamped))
        if outside > 0.0:
            return outside
        return -float(np.min(np.minimum(p - lo, hi - p)))
    # vertical cylinder, center at the middle of the base disk
    c = shape.center
    radial = math.hypot(p[0] - c[0], p[1] - c[1]) - shape.radius
    vertical = max(c[2] - p[2], p[2] - (c[2] + shape.height))
    outside = math.hypot(max(radial, 0.0), max(vertical, 0.0))
    inside = min(max(radial, vertical), 0.0)
    return outside + inside


def _bounding_sphere(shape: Shape) -> tuple[np.ndarray, float]:
    if isinstance(shape, Sphere):
        return shape.center, shape.radius
    if isinstance(shape, Box):
        return (shape.min_corner + shape.max_corner) / 2.0, \
            float(np.linalg.norm(shape.max_corner - shape.min_corner)) / 2.0
    center = shape.center + np.array([0.0, 0.0, shape.height / 2.0])
    return center, math.hypot(shape.radius, shape.height / 2.0)


def detect_collisions(positions: dict[str, np.ndarray], radii: dict[str, float],
                      obstacles: list[Obstacle], ground_exempt: set[str],
                      tick: int, cell_size: float | None = None) -> list[CollisionEvent]:
    """All collision events for one tick's worth of vehicle positions.

    Vehicle pairs collide when their center distance is strictly below the
    sum of body radii; the broad phase is a uniform grid whose cell edge is
    forced to at least the largest pair sum, so it finds exactly the pairs
    an all-against-all sweep would.
    """
    events: list[CollisionEvent] = []
    ids = sorted(positions)
    if not ids:
        return events

    max_r = max(radii[u] for u in ids)
    cell = max(cell_size if cell_size is not None else 0.0, 2.0 * max_r, 1e-6)

    grid: dict[tuple[int, int, int], list[str]] = {}
    cells: dict[str, tuple[int, int, int]] = {}
    for uid in ids:
        p = positions[uid]
        c = (int(math.floor(p[0] / cell)), int(math.floor(p[1] / cell)),
             int(math.floor(p[2] / cell)))
        cells[uid] = c
        grid.setdefault(c, []).append(uid)

    for uid in ids:
        cx, cy, cz = cells[uid]
        pu, ru = positions[uid], radii[uid]
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for vid in grid.get((cx + dx, cy + dy, cz + dz), ()):
                        if vid <= uid:
                            continue
                        limit = ru + radii[vid]
                        if float(np.linalg.norm(pu - positions[vid])) < limit:
                            events.append(CollisionEvent(
                                tick, "uav-uav", (uid, vid),
                                (tuple(map(float, pu)),
                                 tuple(map(float, positions[vid])))))

    for uid in ids:
        pu, ru = positions[uid], radii[uid]
        for obs in obstacles:
            if _shape_clearance(pu, obs.shape) < ru:
                events.append(CollisionEvent(
                    tick, "uav-obstacle", (uid, obs.id),
                    (tuple(map(float, pu)),)))

    for uid in ids:
        if uid not in ground_exempt and positions[uid][2] < 0.0:
            events.append(CollisionEvent(
                tick, "uav-ground", (uid, "ground"),
                (tuple(map(float, positions[uid])),)))

    events.sort(key=lambda e: (e.kind, e.entities))
    return events


# ---------------------------------------------------------------------------
# wire converters


def setpoint_to_payload(sp: ControlSetpoint) -> dict:
    return {
        "mode": sp.mode.value,
        "target": [float(v) for v in sp.target],
        "yaw": float(sp.yaw),
        "hold_up": None if sp.hold_up is None else float(sp.hold_up),
        "speed_limit": None if sp.speed_limit is None else float(sp.speed_limit),
    }


def setpoint_from_payload(d: dict) -> ControlSetpoint:
    return ControlSetpoint(
        mode=SetpointMode(d["mode"]),
        target=tuple(float(v) for v in d["target"]),
        yaw=float(d.get("yaw", 0.0)),
        hold_up=d.get("hold_up"),
        speed_limit=d.get("speed_limit"),
    )


def _order_from_payload(d: dict) -> ControlOrder:
    from .anomaly import zone_from_payload
    zone = zone_from_payload(d["zone"]) if d.get("zone") is not None else None
    return ControlOrder(kind=d["kind"], target=d.get("target"), zone=zone,
                        until=d.get("until"))


# ---------------------------------------------------------------------------
# run report


@dataclass
class RunReport:
    seed: int
    map_name: str
    ticks: int
    wall_seconds: float
    ticks_per_second: float
    missions: list[dict]
    counts: dict
    collisions: list[dict]
    stats: dict
    bus: dict
    log_dir: str | None = None
    error: str | None = None

    def to_payload(self) -> dict:
        return {
            "seed": self.seed,
            "map": self.map_name,
            "ticks": self.ticks,
            "wall_seconds": self.wall_seconds,
            "ticks_per_second": self.ticks_per_second,
            "missions": self.missions,
            "counts": self.counts,
            "collisions": self.collisions,
            "stats": self.stats,
            "bus": self.bus,
            "log_dir": self.log_dir,
            "error": self.error,
        }

    def deterministic_payload(self) -> dict:
        """The report minus wall-clock and filesystem fields, for run-to-run
        and implementation-swap comparisons."""
        d = self.to_payload()
        for key in ("wall_seconds", "ticks_per_second", "log_dir"):
            d.pop(key)
        return d


def _json_line(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _first(*values):
    for v in values:
        if v is not None:
            return v
    return None


# ---------------------------------------------------------------------------
# engine


class SimEngine:
    """One scenario run. Construct, then call run() or step() repeatedly."""

    def __init__(self, scenario: Scenario, out_dir: str | Path | None = None, *,
                 traffic_config: TrafficConfig | None = None,
                 approval_policy: ApprovalPolicy | None = None,
                 gains: ControlGains | None = None,
                 lidar_config: LidarConfig | None = None,
                 histogram_config: HistogramConfig | None = None,
                 speed_policy: SpeedPolicy | None = None,
                 corridor_tolerance: float | None = None,
                 s_max: int | None = None,
                 stats_period: int = 30,
                 frame_sink=None):
        self.scenario = scenario
        self.clock = replace(scenario.clock, tick=0)
        self.net = scenario.network
        self.stats = TrafficStats()
        self.authority = AirspaceAuthority(
            self.net, zones=list(scenario.zones),
            policy=approval_policy, stats=self.stats)
        self.traffic = TrafficManager(
            self.net, [(f.uav_id, f.home) for f in scenario.fleet],
            traffic_config)
        self.bus = MessageBus(RandomStream(scenario.seed, "bus"))
        for prefix in _INTERNAL_PREFIXES:
            self.bus.set_link(prefix, _WIDE_OPEN)

        self.states: dict[str, UavState] = {}
        self.hooks = WorldHooks(
            authority=self.authority, bus=self.bus,
            wind=np.array(scenario.wind_base, dtype=float),
            obstacles=list(scenario.obstacles),
            fog=FogState(), uav_states=self.states)
        self.injector = AnomalyInjector(self.hooks, scenario.anomalies)

        # explicit kwargs win, then the scenario's avoidance profile,
        # then the module defaults
        av = scenario.avoidance
        self.params = {f.uav_id: f.params for f in scenario.fleet}
        self.gains = gains if gains is not None else ControlGains()
        self.lidar_config = _first(lidar_config, av.lidar, LidarConfig())
        self.hist_config = _first(histogram_config, av.histogram, HistogramConfig())
        self.speed_policy = _first(speed_policy, av.speed, SpeedPolicy())
        self.corridor_tolerance = _first(corridor_tolerance,
                                         av.corridor_tolerance, 2.0)
        self.s_max = _first(s_max, av.s_max, 8)
        self.stats_period = max(1, int(stats_period))
        self.frame_sink = frame_sink
        self.external_decider = None  # callable(list[PlanSubmission], tick) -> decisions
        self.external_commander = None  # callable(tick, {uav: sp payload}) -> same shape

        self._lidar_rng = {uid: RandomStream(scenario.seed, f"lidar/{uid}")
                           for uid in self.params}
        self._cell_size = 2.0 * max(
            (w.corridor_radius for w in self.net.airways.values()), default=10.0)

        self._sub_submit = self.bus.subscribe("plan/submit")
        self._sub_decision = self.bus.subscribe("plan/decision")
        self._sub_order = self.bus.subscribe("control/order")
        self._sub_cmd = self.bus.subscribe("uav/cmd/*")
        self._sub_telemetry = self.bus.subscribe("uav/telemetry/*")

        self._commanded: dict[str, ControlSetpoint] = {}
        # last steering decision per uav: (tick, setpoint, direction).
        # direction None means STOP; held entries serve both the sub-tick
        # scan cadence and the steering commitment window.
        self._avoid_hold: dict[str, tuple[int, ControlSetpoint, float | None]] = {}
        self._avoid_vel: dict[str, np.ndarray] = {}  # slewed override velocity
        self._steer_commit = 30  # ticks a free escape direction is kept
        self._avoid_slew = 0.25  # m/s per tick toward the decided velocity
        self._closed_plans: set[str] = set()
        self._history_seen: dict[str, int] = {}
        self._roster: tuple[str, ...] = ()
        self._ctrl: FleetController | None = None
        self._dyn: FleetDynamics | None = None
        self._last_airspace: tuple | None = None
        self.collision_events: list[CollisionEvent] = []

        # gateway-facing queues; drained at the top of each tick
        self._lock = threading.Lock()
        self._live_anomalies: list[dict] = []
        self._live_orders: list[dict] = []
        self._live_demands: list[dict] = []
        self._live_commands: list[tuple[str, dict]] = []

        self._out_dir = Path(out_dir) if out_dir is not None else None
        self._telemetry_file = None
        self._events_file = None
        if self._out_dir is not None:
            self._out_dir.mkdir(parents=True, exist_ok=True)
            self._telemetry_file = open(self._out_dir / "telemetry.jsonl", "w")
            self._events_file = open(self._out_dir / "events.jsonl", "w")

        for demand in scenario.demands:
            self.traffic.ingest_demand(demand, now=0)

    # -------------------------------------------------------- live requests
    def inject_anomaly_live(self, payload: dict) -> None:
        with self._lock:
            self._live_anomalies.append(payload)

    def submit_order_live(self, payload: dict) -> None:
        with self._lock:
            self._live_orders.append(payload)

    def submit_demand_live(self, payload: dict) -> None:
        with self._lock:
            self._live_demands.append(payload)

    def command_uav_live(self, uav_id: str, setpoint_payload: dict) -> None:
        with self._lock:
            self._live_commands.append((uav_id, setpoint_payload))

    # ------------------------------------------------------------ logging
    def _event(self, tick: int, kind: str, data: dict) -> None:
        payload = {"tick": tick, "kind": kind, **data}
        if self._events_file is not None:
            self._events_file.write(_json_line(payload) + "\n")
        if self.frame_sink is not None:
            self.frame_sink("event", payload)

    def _emit_lifecycle(self, tick: int) -> None:
        """Log any plan history entries appended since the last flush."""
        for pid in sorted(self.traffic.plans):
            plan = self.traffic.plans[pid]
            seen = self._history_seen.get(pid, 0)
            for when, state, detail in plan.history[seen:]:
                self._event(tick, "lifecycle",
                            {"plan_id": pid, "uav_id": plan.uav_id,
                             "state": state, "detail": detail, "at": when})
            self._history_seen[pid] = len(plan.history)

    # ------------------------------------------------------------- phases
    def _drain_live(self, now: int) -> tuple[list[dict], list[dict]]:
        with self._lock:
            anomalies = self._live_anomalies
            orders = self._live_orders
            demands = self._live_demands
            commands = self._live_commands
            self._live_anomalies = []
            self._live_orders = []
            self._live_demands = []
            self._live_commands = []
        for d in demands:
            try:
                demand = FlightDemand(
                    id=d["id"], origin=d["origin"], destination=d["destination"],
                    requested_departure=int(d.get("requested_departure", now + 1)))
                self.traffic.ingest_demand(demand, now=now)
                self._event(now, "demand-accepted", {"demand_id": demand.id})
            except (ValidationError, KeyError, TypeError) as exc:
                self._event(now, "demand-rejected",
                            {"demand": d.get("id"), "reason": str(exc)})
        for uid, sp in commands:
            try:
                setpoint_from_payload(sp)  # validate before it rides the bus
                self.bus.publish(f"uav/cmd/{uid}", sp, now)
            except (ValidationError, ValueError, KeyError, TypeError) as exc:
                self._event(now, "command-rejected",
                            {"uav_id": uid, "reason": str(exc)})
        return anomalies, orders

    def _deliver(self, now: int):
        self.bus.deliver_due(now)
        decisions: dict[str, ApprovalDecision] = {}
        for env in self._sub_decision.drain():
            d = ApprovalDecision.from_payload(env.payload)
            decisions[d.plan_id] = d
        submissions = [PlanSubmission.from_payload(env.payload)
                       for env in self._sub_submit.drain()]
        orders = list(self._sub_order.drain())
        for env in self._sub_cmd.drain():
            uid = env.topic.split("/")[2]
            try:
                self._commanded[uid] = setpoint_from_payload(env.payload)
            except (ValidationError, ValueError, KeyError, TypeError):
                pass  # malformed commands die on delivery, not in the loop
        samples = []
        for env in self._sub_telemetry.drain():
            p = env.payload
            samples.append(TelemetrySample(
                p["uav_id"], p["plan_id"], LocalPoint(*p["position"]),
                p.get("airway_id"), p["tick"]))
        return decisions, submissions, orders, samples

    def _apply_anomalies(self, now: int, live: list[dict]) -> tuple[list[str], bool]:
        """Run scheduled and live injections.

        Returns (affected plan ids, dirty): any applied or reverted anomaly
        marks the airspace dirty so traffic resyncs with the authority,
        since reverts restore closures without naming the plans they touch.
        """
        affected: list[str] = []
        dirty = False
        applied, reverted = self.injector.step(now)
        for entry in applied:
            dirty = True
            if entry.error is not None:
                self._event(now, "anomaly-error", entry.to_payload())
            else:
                self._event(now, "anomaly-applied", entry.to_payload())
                self.bus.publish("anomaly/applied", entry.to_payload(), now)
                affected.extend(entry.affected)
        for entry in reverted:
            dirty = True
            self._event(now, "anomaly-reverted", entry.to_payload())
            self.bus.publish("anomaly/reverted", entry.to_payload(), now)
        for payload in live:
            anomaly, entry = self.injector.live_inject(payload, now)
            if entry is None:
                self._event(now, "anomaly-error",
                            {"anomaly_id": payload.get("id"), "error": "rejected"})
            elif entry.error is not None:
                self._event(now, "anomaly-error", entry.to_payload())
            else:
                dirty = True
                self._event(now, "anomaly-applied", entry.to_payload())
                affected.extend(entry.affected)
        return affected, dirty

    def _authority_step(self, now: int, submissions, bus_orders, live_orders,
                        samples, extra_affected: list[str], dirty: bool) -> None:
        affected = list(extra_affected)
        changed = dirty or bool(extra_affected)

        orders: list[ControlOrder] = []
        for env in bus_orders:
            try:
                orders.append(_order_from_payload(env.payload))
            except (ValidationError, KeyError, TypeError) as exc:
                self._event(now, "order-error", {"reason": str(exc)})
        for payload in live_orders:
            try:
                orders.append(_order_from_payload(payload))
            except (ValidationError, KeyError, TypeError) as exc:
                self._event(now, "order-error", {"reason": str(exc)})
        for order in orders:
            try:
                hit = self.authority.issue_airspace_control(order, now)
            except (ValidationError, LookupError) as exc:
                self._event(now, "order-error",
                            {"order": order.kind, "target": order.target,
                             "reason": str(exc)})
                continue
            affected.extend(hit)
            changed = True
            self._event(now, "order", {"order": order.kind, "target": order.target,
                                       "affected": hit})

        if changed:
            self.traffic.apply_airspace_update(
                set(self.authority.closed_airways), affected, now)
            self._publish_airspace(now)

        for event in self.authority.monitor_flights(samples, self.corridor_tolerance):
            self._event(now, "corridor", {
                "corridor_kind": event.kind, "uav_id": event.uav_id,
                "plan_id": event.plan_id, "airway_id": event.airway_id,
                "distance": event.distance})

        if submissions:
            if self.external_decider is not None:
                try:
                    decisions = self.external_decider(submissions, now)
                except TimeoutError:
                    raise EngineAbort("external timeout")
                if decisions is None or len(decisions) != len(submissions):
                    raise EngineAbort("external timeout")
                for sub, dec in zip(submissions, decisions):
                    self.authority.register_external(sub, dec)
            else:
                decisions = [self.authority.approve_plan(sub, now)
                             for sub in submissions]
            for dec in decisions:
                self.bus.publish("plan/decision", dec.to_payload(), now)
                self._event(now, "decision", dec.to_payload())

    def _publish_airspace(self, now: int) -> None:
        payload = {
            "tick": now,
            "closed_airways": sorted(self.authority.closed_airways),
            "ground_stops": {k: v for k, v in
                             sorted(self.authority.ground_stops.items())},
            "active_zones": sorted(z.id for z in self.authority.zones.values()
                                   if z.active_at(now)),
        }
        key = _json_line(payload)
        if key != self._last_airspace:
            self._last_airspace = key
            self.bus.publish("airspace/state", payload, now)
            if self.frame_sink is not None:
                self.frame_sink("airspace", payload)

    def _spawn_and_reclaim(self, now: int) -> dict[str, object]:
        """Keep vehicle entities in lockstep with in-flight plans."""
        plan_by_uav: dict[str, object] = {}
        for pid in sorted(self.traffic.plans):
            plan = self.traffic.plans[pid]
            uid = plan.uav_id
            if plan.state in _IN_FLIGHT and uid is not None:
                if uid not in self.states:
                    if plan.state is not PlanState.TAKING_OFF:
                        # only a departure may create an entity; anything else
                        # is an accounting bug the audit will flag
                        continue
                    ground = self.net.airports[plan.origin].ground_position
                    self.states[uid] = UavState.at_rest(ground)
                    self._commanded[uid] = ControlSetpoint.hold(ground)
                    self.authority.record_departure(pid, now)
                    self._event(now, "spawn", {"uav_id": uid, "plan_id": pid})
                plan_by_uav[uid] = plan
            elif plan.terminal and pid not in self._closed_plans:
                self._closed_plans.add(pid)
                completed = plan.state is PlanState.COMPLETED
                if uid is not None and uid in self.states:
                    del self.states[uid]
                    self._commanded.pop(uid, None)
                    self._avoid_hold.pop(uid, None)
                    self._avoid_vel.pop(uid, None)
                    self._event(now, "reclaim",
                                {"uav_id": uid, "plan_id": pid,
                                 "outcome": plan.state.value})
                if completed and uid is not None:
                    self.traffic.release_uav(uid)
                self.authority.record_terminal(pid, uid, completed)
        return plan_by_uav

    def _resolve_setpoint(self, uid: str, plan, now: int) -> ControlSetpoint:
        state = self.states[uid]
        sp = self._commanded.get(uid)
        if sp is None:
            sp = ControlSetpoint.hold(state.position)
            self._commanded[uid] = sp
        if (plan is None or plan.state is not PlanState.ENROUTE
                or sp.mode is not SetpointMode.WAYPOINT
                or not self.hooks.obstacles):
            return sp

        pos = state.position.as_array()
        fog = self.hooks.fog
        cfg = fog.effective_config(self.lidar_config)
        reach = cfg.max_range
        if not any(float(np.linalg.norm(pos - c)) - r <= reach
                   for c, r in (_bounding_sphere(o.shape)
                                for o in self.hooks.obstacles)):
            return sp

        # sub-tick scan rates hold the last steering decision between scans
        period = 1 if cfg.scan_rate >= 1.0 else max(1, round(1.0 / cfg.scan_rate))
        held = self._avoid_hold.get(uid)
        if period > 1 and now % period != 0:
            if held is not None and now - held[0] < period:
                return held[1]
            return sp

        cloud = scan_lidar(pos, state.attitude, cfg,
                           [o.shape for o in self.hooks.obstacles], now,
                           dropout=fog.dropout_prob, rng=self._lidar_rng[uid])
        if not len(cloud):
            self._avoid_hold.pop(uid, None)
            self._avoid_vel.pop(uid, None)
            return sp
        yaw = quat.yaw_of(state.attitude)
        world = PointCloud(cloud.ranges, cloud.azimuths + yaw,
                           cloud.elevations, cloud.scan_tick)
        hist = build_histogram(world, self.hist_config)
        bearing = math.atan2(sp.target[1] - pos[1], sp.target[0] - pos[0])

        # Steering commitment: while the direct bearing stays blocked, keep
        # flying the last escape direction as long as it remains free.
        # Re-deciding every scan chatters between near-equal valleys, and
        # the resulting velocity reversals destabilize the attitude loop.
        if (held is not None and held[2] is not None
                and now - held[0] < self._steer_commit
                and not hist.free(hist.sector_of(bearing))
                and hist.free(hist.sector_of(held[2]))):
            decided = held[1]
        else:
            steering = select_heading(hist, bearing, self.s_max)
            decided = avoidance_override(sp, steering, hist, self.speed_policy)
            self._avoid_hold[uid] = (
                now, decided, None if steering is STOP else float(steering))
        return self._slew_override(uid, state, decided)

    def _slew_override(self, uid: str, state: UavState,
                       decided: ControlSetpoint) -> ControlSetpoint:
        """Approach the decided override velocity at a bounded rate.

        A hard reversal asks the attitude loop for more lateral force than
        the tilt cone allows; the thrust vector then spends whole seconds
        far from vertical and altitude authority collapses. Stepping the
        commanded velocity keeps the demanded acceleration flyable.
        """
        want = np.asarray(decided.target, dtype=float)
        prev = self._avoid_vel.get(uid)
        if prev is None:
            prev = np.array([state.velocity[0], state.velocity[1], 0.0])
        delta = want - prev
        dist = float(np.linalg.norm(delta))
        vec = want if dist <= self._avoid_slew else (
            prev + delta * (self._avoid_slew / dist))
        self._avoid_vel[uid] = vec
        speed = math.hypot(vec[0], vec[1])
        head = math.atan2(vec[1], vec[0]) if speed > 0.5 else decided.yaw
        return ControlSetpoint.velocity(
            (float(vec[0]), float(vec[1]), 0.0), yaw=head,
            hold_up=decided.hold_up)

    def _physics(self, now: int, plan_by_uav: dict) -> None:
        uids = sorted(self.states)
        if not uids:
            return
        roster = tuple(uids)
        if roster != self._roster:
            params = [self.params[u] for u in uids]
            self._ctrl = FleetController(params, [self.gains] * len(uids))
            self._dyn = FleetDynamics(params)
            self._roster = roster

        n = len(uids)
        pos = np.empty((n, 3))
        vel = np.empty((n, 3))
        att = np.empty((n, 4))
        rate = np.empty((n, 3))
        motor = np.empty((n, 4))
        health = np.empty((n, 4))
        mode = np.zeros(n, dtype=int)
        target = np.empty((n, 3))
        yaw_sp = np.zeros(n)
        hold_up = np.full(n, np.nan)
        speed_limit = np.full(n, np.inf)

        for i, uid in enumerate(uids):
            st = self.states[uid]
            pos[i] = st.position.as_array()
            vel[i] = st.velocity
            att[i] = st.attitude
            rate[i] = st.angular_rate
            motor[i] = st.motor_speed
            health[i] = st.health
            sp = self._resolve_setpoint(uid, plan_by_uav.get(uid), now)
            target[i] = sp.target
            yaw_sp[i] = sp.yaw
            if sp.mode is SetpointMode.VELOCITY:
                mode[i] = 1
                if sp.hold_up is not None:
                    hold_up[i] = sp.hold_up
            if sp.speed_limit is not None:
                speed_limit[i] = sp.speed_limit

        dt = self.clock.physics_dt
        for _ in range(self.clock.physics_substeps):
            cmd = self._ctrl.motor_commands(pos, vel, att, rate, mode, target,
                                            yaw_sp, hold_up, speed_limit)
            self._dyn.step(pos, vel, att, rate, motor, health, cmd,
                           self.hooks.wind, dt)

        for i, uid in enumerate(uids):
            plan = plan_by_uav.get(uid)
            if plan is not None and plan.state is PlanState.TAKING_OFF:
                # the pad carries the vehicle until thrust beats weight
                pad = self.net.airports[plan.origin].ground_position.up
                if pos[i, 2] < pad:
                    pos[i, 2] = pad
                    vel[i, 2] = max(0.0, vel[i, 2])
            st = self.states[uid]
            st.position = LocalPoint(*pos[i])
            st.velocity = vel[i]
            st.attitude = att[i]
            st.angular_rate = rate[i]
            st.motor_speed = motor[i]

    def _collisions(self, now: int, plan_by_uav: dict) -> None:
        if not self.states:
            return
        positions = {u: s.position.as_array() for u, s in self.states.items()}
        radii = {u: self.params[u].body_radius for u in self.states}
        exempt = {u for u, p in plan_by_uav.items()
                  if p.state is PlanState.LANDING}
        events = detect_collisions(positions, radii, self.hooks.obstacles,
                                   exempt, now, self._cell_size)
        for ev in events:
            self.collision_events.append(ev)
            self.stats.collisions += 1
            self._event(now, "collision", ev.to_payload())
            self.bus.publish("airspace/collision", ev.to_payload(), now)
            for ent in ev.entities:
                plan = plan_by_uav.get(ent)
                if plan is None or plan.terminal:
                    continue
                self.traffic.abort_plan(plan.id, now, "collision")
                self._closed_plans.add(plan.id)
                self.authority.record_terminal(plan.id, ent, False)
                if ent in self.states:
                    del self.states[ent]
                    self._commanded.pop(ent, None)
                    self._avoid_hold.pop(ent, None)
                    self._avoid_vel.pop(ent, None)
                self._event(now, "reclaim",
                            {"uav_id": ent, "plan_id": plan.id,
                             "outcome": "aborted"})

    def _telemetry(self, now: int, plan_by_uav: dict) -> None:
        for uid in sorted(self.states):
            st = self.states[uid]
            plan = plan_by_uav.get(uid)
            airway = None
            if (plan is not None and plan.state is PlanState.ENROUTE
                    and plan.route is not None
                    and 1 <= plan.progress <= len(plan.route.airways)):
                airway = plan.route.airways[plan.progress - 1]
            payload = {
                "tick": now,
                "uav_id": uid,
                "plan_id": plan.id if plan is not None else None,
                "state": plan.state.value if plan is not None else None,
                "position": [st.position.east, st.position.north, st.position.up],
                "velocity": [float(v) for v in st.velocity],
                "yaw": quat.yaw_of(st.attitude),
                "airway_id": airway,
                "health": [float(h) for h in st.health],
            }
            self.bus.publish(f"uav/telemetry/{uid}", payload, now)
            if self._telemetry_file is not None:
                self._telemetry_file.write(_json_line(payload) + "\n")
            if self.frame_sink is not None:
                self.frame_sink("telemetry", payload)

    def _audit(self, now: int) -> None:
        in_flight = {p.uav_id for p in self.traffic.plans.values()
                     if p.state in _IN_FLIGHT and p.uav_id is not None}
        if in_flight != set(self.states):
            raise EngineAbort(
                f"tick {now}: entity set {sorted(self.states)} does not match "
                f"in-flight plans {sorted(in_flight)}")

    # --------------------------------------------------------------- tick
    def step(self) -> None:
        now = self.clock.tick

        live_anomalies, live_orders = self._drain_live(now)
        decisions, submissions, bus_orders, samples = self._deliver(now)
        affected, dirty = self._apply_anomalies(now, live_anomalies)
        self._authority_step(now, submissions, bus_orders, live_orders,
                             samples, affected, dirty)

        subs_out, setpoints = self.traffic.step(now, self.states, decisions)
        for sub in subs_out:
            self.bus.publish("plan/submit", sub.to_payload(), now)
        payloads = {uid: setpoint_to_payload(setpoints[uid])
                    for uid in sorted(setpoints)}
        if self.external_commander is not None:
            # command authority is bridged out: the external system sees the
            # planned setpoints and must answer before the tick may advance
            try:
                replaced = self.external_commander(now, payloads)
            except TimeoutError:
                raise EngineAbort("external timeout")
            if replaced is None or not isinstance(replaced, dict):
                raise EngineAbort("external timeout")
            try:
                for uid, sp in replaced.items():
                    setpoint_from_payload(sp)  # reject garbage before the bus
                payloads = {uid: replaced[uid] for uid in sorted(replaced)}
            except (ValidationError, KeyError, TypeError, ValueError) as exc:
                raise EngineAbort(f"external command payload invalid: {exc}")
        for uid, payload in payloads.items():
            self.bus.publish(f"uav/cmd/{uid}", payload, now)

        plan_by_uav = self._spawn_and_reclaim(now)

        tick_dt = self.clock.tick_duration
        self.hooks.obstacles[:] = [o.moved(tick_dt) for o in self.hooks.obstacles]

        self._physics(now, plan_by_uav)
        self._collisions(now, plan_by_uav)

        if now % self.stats_period == 0:
            payload = {"tick": now, **self.stats.snapshot(), "bus": self.bus.stats()}
            self.bus.publish("stats/traffic", payload, now)
            if self.frame_sink is not None:
                self.frame_sink("stats", payload)

        self._telemetry(now, plan_by_uav)
        self._emit_lifecycle(now)
        self._audit(now)
        self.clock.advance()

    # ---------------------------------------------------------------- run
    def done(self) -> bool:
        return self.traffic.all_terminal()

    def run(self, until: int | None = None, should_stop=None) -> RunReport:
        started = time.perf_counter()
        error = None
        try:
            while not self.done():
                if until is not None and self.clock.tick >= until:
                    break
                if should_stop is not None and should_stop():
                    break
                self.step()
        except EngineAbort as exc:
            error = str(exc)
        wall = time.perf_counter() - started
        return self.finalize(wall, error)

    def finalize(self, wall: float, error: str | None = None) -> RunReport:
        missions = []
        counts = {"total": 0, "completed": 0, "aborted": 0, "active": 0}
        for pid in sorted(self.traffic.plans):
            plan = self.traffic.plans[pid]
            counts["total"] += 1
            if plan.state is PlanState.COMPLETED:
                counts["completed"] += 1
            elif plan.state is PlanState.ABORTED:
                counts["aborted"] += 1
            else:
                counts["active"] += 1
            missions.append({
                "plan_id": pid,
                "demand_id": plan.demand_id,
                "uav_id": plan.uav_id,
                "origin": plan.origin,
                "destination": plan.destination,
                "state": plan.state.value,
                "reason": plan.abort_reason,
                "history": [[t, s, d] for t, s, d in plan.history],
            })

        ticks = self.clock.tick
        report = RunReport(
            seed=self.scenario.seed,
            map_name=self.scenario.map_name,
            ticks=ticks,
            wall_seconds=wall,
            ticks_per_second=(ticks / wall) if wall > 0 else float(ticks),
            missions=missions,
            counts=counts,
            collisions=[ev.to_payload() for ev in self.collision_events],
            stats=self.stats.snapshot(),
            bus=self.bus.stats(),
            log_dir=str(self._out_dir) if self._out_dir is not None else None,
            error=error,
        )

        if self._telemetry_file is not None:
            self._telemetry_file.close()
            self._telemetry_file = None
        if self._events_file is not None:
            self._events_file.close()
            self._events_file = None
        if self._out_dir is not None:
            (self._out_dir / "stats.json").write_text(
                json.dumps({**self.stats.snapshot(), "bus": self.bus.stats()},
                           sort_keys=True, indent=2) + "\n")
            # wall-clock fields stay out of the file so reruns of the same
            # (scenario, seed) produce byte-identical run records
            (self._out_dir / "report.json").write_text(
                json.dumps(report.deterministic_payload(), sort_keys=True,
                           indent=2) + "\n")
        return report
