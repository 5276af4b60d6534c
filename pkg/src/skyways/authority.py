"""Airspace authority: plan approval, control orders, monitoring, statistics.

One authority instance owns the regulatory state of a run: which airways
are closed, which airports are ground-stopped, which no-fly zones exist,
and the departure slot book for every airport pad. It is a single-owner
state machine; the engine feeds it submissions and telemetry in tick
order, and decisions are pure functions of that ordered history.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import NoFlyZone, segment_intersects_nfz
from .network import AirwayNetwork, LookupError_
from .world import LocalPoint, ValidationError

__all__ = [
    "Verdict",
    "ApprovalPolicy",
    "ApprovalDecision",
    "PlanSubmission",
    "ControlOrder",
    "TelemetrySample",
    "CorridorEvent",
    "TrafficStats",
    "AirspaceAuthority",
]


class Verdict(Enum):
    APPROVED = "approved"
    REJECTED = "rejected"
    DEFERRED = "deferred"


@dataclass(frozen=True)
class ApprovalPolicy:
    """Knobs for the built-in permissive approval behaviour.

    departure_separation is in ticks (30/s): successive takeoffs from one
    pad are spaced at least this far apart.
    """

    max_airway_occupancy_fraction: float = 0.75
    departure_separation: int = 300
    nfz_check: bool = True

    def __post_init__(self):
        if not 0.0 < self.max_airway_occupancy_fraction <= 1.0:
            raise ValidationError("max_airway_occupancy_fraction outside (0, 1]")
        if self.departure_separation < 0:
            raise ValidationError("departure_separation must be non-negative")


@dataclass(frozen=True)
class ApprovalDecision:
    plan_id: str
    verdict: Verdict
    reason: str | None = None
    assigned_departure: int | None = None
    retry_tick: int | None = None

    def __post_init__(self):
        if self.verdict is Verdict.APPROVED and self.assigned_departure is None:
            raise ValidationError("approved decision needs assigned_departure")

    def to_payload(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "verdict": self.verdict.value,
            "reason": self.reason,
            "assigned_departure": self.assigned_departure,
            "retry_tick": self.retry_tick,
        }

    @staticmethod
    def from_payload(d: dict) -> "ApprovalDecision":
        return ApprovalDecision(
            plan_id=d["plan_id"], verdict=Verdict(d["verdict"]),
            reason=d.get("reason"), assigned_departure=d.get("assigned_departure"),
            retry_tick=d.get("retry_tick"))


@dataclass(frozen=True)
class PlanSubmission:
    """The bus-payload view of a plan asking for approval."""

    plan_id: str
    origin: str
    destination: str
    route_nodes: tuple[str, ...]
    route_airways: tuple[str, ...]
    requested_departure: int

    def __post_init__(self):
        if len(self.route_airways) != max(0, len(self.route_nodes) - 1):
            raise ValidationError("airway count must be node count - 1")
        if not self.route_nodes:
            raise ValidationError("empty route")

    @staticmethod
    def from_payload(d: dict) -> "PlanSubmission":
        return PlanSubmission(
            plan_id=d["plan_id"], origin=d["origin"], destination=d["destination"],
            route_nodes=tuple(d["route_nodes"]), route_airways=tuple(d["route_airways"]),
            requested_departure=int(d["requested_departure"]))

    def to_payload(self) -> dict:
        return {
            "plan_id": self.plan_id, "origin": self.origin,
            "destination": self.destination, "route_nodes": list(self.route_nodes),
            "route_airways": list(self.route_airways),
            "requested_departure": self.requested_departure,
        }


_ORDER_KINDS = frozenset({
    "close_airway", "reopen_airway", "activate_nfz", "deactivate_nfz",
    "ground_stop", "lift_ground_stop",
})


@dataclass(frozen=True)
class ControlOrder:
    """An airspace control action. ``target`` names an airway, airport, or
    zone id; activate_nfz carries the zone definition itself."""

    kind: str
    target: str | None = None
    zone: NoFlyZone | None = None
    until: int | None = None

    def __post_init__(self):
        if self.kind not in _ORDER_KINDS:
            raise ValidationError(f"unknown control order kind {self.kind!r}")
        if self.kind == "activate_nfz":
            if self.zone is None:
                raise ValidationError("activate_nfz requires a zone")
        elif self.target is None:
            raise ValidationError(f"{self.kind} requires a target id")


@dataclass(frozen=True)
class TelemetrySample:
    """What the authority sees of one UAV each tick."""

    uav_id: str
    plan_id: str
    position: LocalPoint
    airway_id: str | None
    tick: int


@dataclass(frozen=True)
class CorridorEvent:
    kind: str  # enter | exit | deviation
    uav_id: str
    plan_id: str
    airway_id: str
    tick: int
    distance: float = 0.0


@dataclass
class _AirwayCounters:
    transits: int = 0
    occupancy: int = 0
    peak: int = 0


@dataclass
class _AirportCounters:
    departures: int = 0
    arrivals: int = 0


class TrafficStats:
    """Run counters. Everything but current occupancy only ever grows."""

    def __init__(self):
        self.airways: dict[str, _AirwayCounters] = {}
        self.airports: dict[str, _AirportCounters] = {}
        self.completed_missions = 0
        self.collisions = 0

    def _airway(self, wid: str) -> _AirwayCounters:
        c = self.airways.get(wid)
        if c is None:
            c = self.airways[wid] = _AirwayCounters()
        return c

    def _airport(self, aid: str) -> _AirportCounters:
        c = self.airports.get(aid)
        if c is None:
            c = self.airports[aid] = _AirportCounters()
        return c

    def enter_airway(self, wid: str) -> None:
        c = self._airway(wid)
        c.transits += 1
        c.occupancy += 1
        c.peak = max(c.peak, c.occupancy)

    def exit_airway(self, wid: str) -> None:
        c = self._airway(wid)
        c.occupancy = max(0, c.occupancy - 1)

    def occupancy(self, wid: str) -> int:
        c = self.airways.get(wid)
        return 0 if c is None else c.occupancy

    def record_departure(self, airport: str) -> None:
        self._airport(airport).departures += 1

    def record_arrival(self, airport: str) -> None:
        self._airport(airport).arrivals += 1

    def record_completed(self) -> None:
        self.completed_missions += 1

    def record_collisions(self, n: int = 1) -> None:
        self.collisions += n

    def snapshot(self) -> dict:
        return {
            "airways": {
                wid: {"transits": c.transits, "occupancy": c.occupancy, "peak": c.peak}
                for wid, c in sorted(self.airways.items())
            },
            "airports": {
                aid: {"departures": c.departures, "arrivals": c.arrivals}
                for aid, c in sorted(self.airports.items())
            },
            "completed_missions": self.completed_missions,
            "collisions": self.collisions,
        }


@dataclass
class _PlanRecord:
    origin: str
    destination: str
    nodes: tuple[str, ...]
    remaining: set[str]
    assigned_departure: int
    departed: bool = False
    terminal: bool = False


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    d = b - a
    dd = float(np.dot(d, d))
    if dd == 0.0:
        return float(np.linalg.norm(p - a))
    t = min(1.0, max(0.0, float(np.dot(p - a, d)) / dd))
    return float(np.linalg.norm(p - (a + t * d)))


class AirspaceAuthority:
    """Regulator state machine for one run."""

    def __init__(self, net: AirwayNetwork, zones: list[NoFlyZone] | None = None,
                 policy: ApprovalPolicy | None = None, stats: TrafficStats | None = None):
        self.net = net
        self.policy = policy if policy is not None else ApprovalPolicy()
        self.stats = stats if stats is not None else TrafficStats()
        self.zones: dict[str, NoFlyZone] = {}
        for z in (zones or []):
            if z.id in self.zones:
                raise ValidationError(f"duplicate zone id {z.id}")
            self.zones[z.id] = z
        self.closed_airways: set[str] = set()
        self.ground_stops: dict[str, int | None] = {}
        self._pad_slots: dict[str, list[int]] = {}
        self._plans: dict[str, _PlanRecord] = {}
        # monitoring state: current airway and deviation latch per uav
        self._uav_airway: dict[str, str | None] = {}
        self._deviating: set[str] = set()

    # ---------------------------------------------------------- approvals
    def _route_points(self, sub: PlanSubmission) -> list[np.ndarray]:
        """Route polyline including the vertical climb and descent legs."""
        pts = [self.net.airports[sub.origin].ground_position.as_array()]
        for nid in sub.route_nodes:
            node = self.net.nodes.get(nid)
            if node is None:
                raise LookupError_(f"unknown node {nid}")
            pts.append(node.position.as_array())
        pts.append(self.net.airports[sub.destination].ground_position.as_array())
        return pts

    def _earliest_slot(self, airport: str, earliest: int) -> int:
        pads = self.net.airports[airport].pads
        sep = self.policy.departure_separation
        slots = self._pad_slots.get(airport, [])
        t = earliest
        if sep == 0:
            return t
        while True:
            conflicts = [s for s in slots if abs(s - t) < sep]
            if len(conflicts) < pads:
                return t
            t = min(conflicts) + sep

    def approve_plan(self, sub: PlanSubmission, now: int) -> ApprovalDecision:
        """Decide one submission against current airspace state.

        Approval books a departure slot and registers the plan, so calling
        order matters; identical ordered histories give identical decisions.
        """
        for apt in (sub.origin, sub.destination):
            if apt not in self.net.airports:
                raise LookupError_(f"unknown airport {apt}")

        stop = self.ground_stops.get(sub.origin, -1)
        if stop != -1 and (stop is None or stop > now):
            retry = (now + self.policy.departure_separation) if stop is None else stop
            return ApprovalDecision(sub.plan_id, Verdict.DEFERRED,
                                    reason="ground_stop", retry_tick=max(retry, now + 1))

        if self.policy.nfz_check and self.zones:
            pts = self._route_points(sub)
            for zone in self.zones.values():
                if not zone.active_at(now):
                    continue
                for a, b in zip(pts, pts[1:]):
                    if segment_intersects_nfz(a, b, zone, now):
                        return ApprovalDecision(sub.plan_id, Verdict.REJECTED, reason="nfz")

        for wid in sub.route_airways:
            if wid not in self.net.airways:
                raise LookupError_(f"unknown airway {wid}")
            if wid in self.closed_airways:
                return ApprovalDecision(sub.plan_id, Verdict.REJECTED, reason="airway_closed")

        for wid in sub.route_airways:
            cap = self.net.airways[wid].capacity
            if self.stats.occupancy(wid) >= cap * self.policy.max_airway_occupancy_fraction:
                return ApprovalDecision(
                    sub.plan_id, Verdict.DEFERRED, reason="airway_busy",
                    retry_tick=now + max(1, self.policy.departure_separation))

        # resubmission of an undeparted plan supersedes its old booking
        prior = self._plans.get(sub.plan_id)
        if prior is not None and not prior.departed and not prior.terminal:
            slots = self._pad_slots.get(prior.origin, [])
            if prior.assigned_departure in slots:
                slots.remove(prior.assigned_departure)

        assigned = self._earliest_slot(sub.origin, max(sub.requested_departure, now + 1))
        self._pad_slots.setdefault(sub.origin, []).append(assigned)
        self._plans[sub.plan_id] = _PlanRecord(
            origin=sub.origin, destination=sub.destination, nodes=sub.route_nodes,
            remaining=set(sub.route_airways), assigned_departure=assigned)
        return ApprovalDecision(sub.plan_id, Verdict.APPROVED, assigned_departure=assigned)

    def register_external(self, sub: PlanSubmission, decision: ApprovalDecision) -> None:
        """Track a plan whose approval came from an attached external decider.

        Keeps departure/arrival accounting and flight monitoring working even
        though this authority did not make the call itself.
        """
        if decision.verdict is not Verdict.APPROVED:
            return
        prior = self._plans.get(sub.plan_id)
        if prior is not None and not prior.departed and not prior.terminal:
            slots = self._pad_slots.get(prior.origin, [])
            if prior.assigned_departure in slots:
                slots.remove(prior.assigned_departure)
        self._pad_slots.setdefault(sub.origin, []).append(decision.assigned_departure)
        self._plans[sub.plan_id] = _PlanRecord(
            origin=sub.origin, destination=sub.destination, nodes=sub.route_nodes,
            remaining=set(sub.route_airways),
            assigned_departure=decision.assigned_departure)

    # ------------------------------------------------------ control orders
    def issue_airspace_control(self, order: ControlOrder, now: int) -> list[str]:
        """Apply one order; returns ids of plans that must react."""
        kind = order.kind
        affected: list[str] = []

        if kind == "close_airway":
            if order.target not in self.net.airways:
                raise LookupError_(f"unknown airway {order.target}")
            self.closed_airways.add(order.target)
            affected = [pid for pid, rec in self._plans.items()
                        if not rec.terminal and order.target in rec.remaining]
        elif kind == "reopen_airway":
            if order.target not in self.net.airways:
                raise LookupError_(f"unknown airway {order.target}")
            self.closed_airways.discard(order.target)
        elif kind == "activate_nfz":
            zone = order.zone
            self.zones[zone.id] = zone
            if zone.active_at(now):
                for pid, rec in self._plans.items():
                    if rec.terminal:
                        continue
                    pts = [self.net.nodes[n].position.as_array() for n in rec.nodes]
                    if any(segment_intersects_nfz(a, b, zone, now)
                           for a, b in zip(pts, pts[1:])):
                        affected.append(pid)
        elif kind == "deactivate_nfz":
            if order.target not in self.zones:
                raise LookupError_(f"unknown zone {order.target}")
            del self.zones[order.target]
        elif kind == "ground_stop":
            if order.target not in self.net.airports:
                raise LookupError_(f"unknown airport {order.target}")
            self.ground_stops[order.target] = order.until
            slots = self._pad_slots.get(order.target, [])
            for pid, rec in self._plans.items():
                if rec.origin == order.target and not rec.departed and not rec.terminal:
                    affected.append(pid)
                    if rec.assigned_departure in slots:
                        slots.remove(rec.assigned_departure)
        elif kind == "lift_ground_stop":
            if order.target not in self.net.airports:
                raise LookupError_(f"unknown airport {order.target}")
            self.ground_stops.pop(order.target, None)

        affected.sort()
        return affected

    # ------------------------------------------------------- plan tracking
    def record_departure(self, plan_id: str, now: int) -> None:
        rec = self._plans.get(plan_id)
        if rec is None or rec.departed:
            return
        rec.departed = True
        self.stats.record_departure(rec.origin)

    def record_terminal(self, plan_id: str, uav_id: str | None, completed: bool) -> None:
        rec = self._plans.get(plan_id)
        if rec is not None and not rec.terminal:
            rec.terminal = True
            if not rec.departed and rec.assigned_departure in self._pad_slots.get(rec.origin, []):
                self._pad_slots[rec.origin].remove(rec.assigned_departure)
            if completed:
                self.stats.record_arrival(rec.destination)
                self.stats.record_completed()
        if uav_id is not None:
            current = self._uav_airway.pop(uav_id, None)
            if current is not None:
                self.stats.exit_airway(current)
            self._deviating.discard(uav_id)

    def update_remaining(self, plan_id: str, remaining_airways) -> None:
        """Traffic-management's view of the airways a plan still has to fly."""
        rec = self._plans.get(plan_id)
        if rec is not None:
            rec.remaining = set(remaining_airways)

    # ----------------------------------------------------------- monitoring
    def monitor_flights(self, samples: list[TelemetrySample],
                        corridor_tolerance: float = 2.0) -> list[CorridorEvent]:
        """Track airway entries/exits and corridor deviations.

        Deviation events are edge-triggered: one event per excursion, armed
        again once the UAV is back inside the corridor.
        """
        events: list[CorridorEvent] = []
        for s in samples:
            prev = self._uav_airway.get(s.uav_id)
            cur = s.airway_id
            if cur != prev:
                if prev is not None:
                    self.stats.exit_airway(prev)
                    events.append(CorridorEvent("exit", s.uav_id, s.plan_id, prev, s.tick))
                if cur is not None:
                    self.stats.enter_airway(cur)
                    events.append(CorridorEvent("enter", s.uav_id, s.plan_id, cur, s.tick))
                self._uav_airway[s.uav_id] = cur
                self._deviating.discard(s.uav_id)
            if cur is None:
                continue
            airway = self.net.airways.get(cur)
            if airway is None:
                continue
            a, b = self.net.segment(cur)
            lateral = _point_segment_distance(s.position.as_array(), a, b)
            limit = airway.corridor_radius + corridor_tolerance
            if lateral > limit:
                if s.uav_id not in self._deviating:
                    self._deviating.add(s.uav_id)
                    events.append(CorridorEvent("deviation", s.uav_id, s.plan_id,
                                                cur, s.tick, distance=lateral))
            else:
                self._deviating.discard(s.uav_id)
        return events

    # ------------------------------------------------------------ snapshots
    def airspace_snapshot(self) -> dict:
        return {
            "closed_airways": sorted(self.closed_airways),
            "ground_stops": {k: self.ground_stops[k] for k in sorted(self.ground_stops)},
            "zones": sorted(self.zones),
        }
