"""Flight-plan lifecycle, takeoff/landing sequencing, and separation.

The traffic manager is the operator side: it turns demands into routed
plans, walks each plan through its state machine as approvals and
telemetry arrive, emits the control setpoint for every airborne vehicle,
and scales speeds so vehicles sharing an airway keep their distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .authority import ApprovalDecision, PlanSubmission, Verdict
from .control import ControlSetpoint, SetpointMode, track_route
from .dynamics import UavState
from .network import AirwayNetwork, Route, shortest_node_route, shortest_route
from .world import LocalPoint, ValidationError

__all__ = [
    "PlanState",
    "FlightDemand",
    "FlightPlan",
    "TrafficConfig",
    "plan_mission",
    "enforce_separation",
    "TrafficManager",
]


class PlanState(Enum):
    DRAFT = "draft"
    SUBMITTED = "submitted"
    APPROVED = "approved"
    TAKING_OFF = "taking-off"
    ENROUTE = "enroute"
    LANDING = "landing"
    COMPLETED = "completed"
    ABORTED = "aborted"


_TERMINAL = frozenset({PlanState.COMPLETED, PlanState.ABORTED})

_LEGAL: dict[PlanState, frozenset[PlanState]] = {
    PlanState.DRAFT: frozenset({PlanState.SUBMITTED, PlanState.ABORTED}),
    PlanState.SUBMITTED: frozenset({PlanState.APPROVED, PlanState.ABORTED}),
    PlanState.APPROVED: frozenset({PlanState.TAKING_OFF, PlanState.SUBMITTED,
                                   PlanState.ABORTED}),
    PlanState.TAKING_OFF: frozenset({PlanState.ENROUTE, PlanState.ABORTED}),
    PlanState.ENROUTE: frozenset({PlanState.LANDING, PlanState.ABORTED}),
    PlanState.LANDING: frozenset({PlanState.COMPLETED, PlanState.ABORTED}),
    PlanState.COMPLETED: frozenset(),
    PlanState.ABORTED: frozenset(),
}


@dataclass(frozen=True)
class FlightDemand:
    id: str
    origin: str
    destination: str
    requested_departure: int = 0
    payload: str = ""

    def __post_init__(self):
        if self.origin == self.destination:
            raise ValidationError(f"demand {self.id}: origin equals destination")
        if self.requested_departure < 0:
            raise ValidationError(f"demand {self.id}: departure tick negative")


@dataclass
class FlightPlan:
    """One demand's journey through the lifecycle.

    ``progress`` is the index of the route node currently being flown
    toward. Transitions are checked against the legal relation and kept in
    ``history`` as (tick, state, detail) for post-run audits.
    """

    id: str
    demand_id: str
    origin: str
    destination: str
    requested_departure: int
    uav_id: str | None = None
    route: Route | None = None
    state: PlanState = PlanState.DRAFT
    progress: int = 0
    assigned_departure: int | None = None
    retry_tick: int | None = None
    abort_reason: str | None = None
    replan_needed: bool = False
    last_submit_tick: int | None = None
    history: list = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return self.state in _TERMINAL

    def transition(self, new_state: PlanState, tick: int, detail: str = "") -> None:
        if new_state not in _LEGAL[self.state]:
            raise ValidationError(
                f"plan {self.id}: illegal transition {self.state.value} -> {new_state.value}")
        self.state = new_state
        self.history.append((tick, new_state.value, detail))

    def submission(self) -> PlanSubmission:
        return PlanSubmission(
            plan_id=self.id, origin=self.origin, destination=self.destination,
            route_nodes=tuple(self.route.nodes), route_airways=tuple(self.route.airways),
            requested_departure=self.requested_departure)

    def remaining_airways(self) -> list[str]:
        if self.route is None:
            return []
        return list(self.route.airways[max(0, self.progress - 1):])


@dataclass(frozen=True)
class TrafficConfig:
    """Operator-side tunables.

    s_min is the along-airway separation where speed scaling starts;
    vehicles closer than s_min/2 hold. lane_offset shifts each vehicle
    right of the centerline so opposing streams on a bidirectional airway
    never meet head-on.
    """

    s_min: float = 15.0
    node_radius: float = 8.0
    acceptance_radius: float = 2.0
    cruise_speed: float = 8.0
    climb_tolerance: float = 1.0
    touchdown_altitude: float = 0.1
    touchdown_speed: float = 0.2
    lane_offset: float = 3.0
    resubmit_after: int = 150  # ticks without a decision before retrying

    def __post_init__(self):
        if self.s_min <= 0 or self.node_radius <= 0 or self.acceptance_radius <= 0:
            raise ValidationError("separation distances must be positive")
        if self.cruise_speed <= 0:
            raise ValidationError("cruise_speed must be positive")
        if self.lane_offset < 0:
            raise ValidationError("lane_offset must be non-negative")
        if self.resubmit_after < 1:
            raise ValidationError("resubmit_after must be >= 1 tick")


def plan_mission(demand: FlightDemand, net: AirwayNetwork,
                 closed: frozenset[str] | set[str] = frozenset(),
                 plan_id: str | None = None, now: int = 0) -> FlightPlan:
    """Route a demand into a draft plan; unroutable demands abort at birth."""
    plan = FlightPlan(
        id=plan_id if plan_id is not None else f"P-{demand.id}",
        demand_id=demand.id, origin=demand.origin, destination=demand.destination,
        requested_departure=demand.requested_departure)
    route = shortest_route(net, demand.origin, demand.destination, closed)
    if route is None:
        plan.state = PlanState.ABORTED
        plan.abort_reason = "unreachable"
        plan.history.append((now, PlanState.ABORTED.value, "unreachable"))
    else:
        plan.route = route
    return plan


# ------------------------------------------------------------- separation

def enforce_separation(plans, states: dict[str, UavState], net: AirwayNetwork,
                       s_min: float = 15.0, node_radius: float = 8.0) -> dict[str, float]:
    """Per-UAV speed scale factors from chain spacing and node mutexes.

    Enroute vehicles on the same directed airway leg are ordered by
    distance along the centerline; a follower within s_min of its leader
    scales down linearly, reaching zero at s_stop = s_min/2. A vehicle
    approaching a node that another vehicle currently occupies holds until
    the node clears. Ties are broken by uav id so results are replayable.
    """
    s_stop = s_min / 2.0
    plans = list(plans)
    scales: dict[str, float] = {}
    lanes: dict[tuple[str, str], list[tuple[float, str]]] = {}
    enroute = []
    for plan in plans:
        if plan.state is not PlanState.ENROUTE or plan.uav_id is None:
            continue
        st = states.get(plan.uav_id)
        if st is None or plan.route is None:
            continue
        scales[plan.uav_id] = 1.0
        enroute.append(plan)
        k = plan.progress
        if not 1 <= k <= len(plan.route.airways):
            continue
        wid = plan.route.airways[k - 1]
        a = net.nodes[plan.route.nodes[k - 1]].position.as_array()
        b = net.nodes[plan.route.nodes[k]].position.as_array()
        d = b - a
        norm = float(np.linalg.norm(d))
        if norm == 0.0:
            continue
        along = float(np.dot(st.position.as_array() - a, d / norm))
        lanes.setdefault((wid, plan.route.nodes[k]), []).append((along, plan.uav_id))

    # chain spacing per directed leg, leaders first
    for members in lanes.values():
        members.sort(key=lambda m: (-m[0], m[1]))
        for (lead_s, _), (foll_s, foll_id) in zip(members, members[1:]):
            gap = lead_s - foll_s
            if gap < s_min:
                scale = (gap - s_stop) / (s_min - s_stop)
                scale = min(1.0, max(0.0, scale))
                scales[foll_id] = min(scales[foll_id], scale)

    # node mutex: one vehicle in a node volume at a time
    occupants: dict[str, list[tuple[bool, str]]] = {}
    for plan in enroute:
        st = states[plan.uav_id]
        route = plan.route
        k = min(plan.progress, len(route.nodes) - 1)
        for idx in (k - 1, k):
            if not 0 <= idx < len(route.nodes):
                continue
            nid = route.nodes[idx]
            npos = net.nodes[nid].position.as_array()
            if float(np.linalg.norm(st.position.as_array() - npos)) <= node_radius:
                approaching = idx == k
                occupants.setdefault(nid, []).append((approaching, plan.uav_id))

    # vertical-phase vehicles occupy their pad's node too: a lander braking
    # out of the final leg and a climber cresting into its first leg sit at
    # node altitude while their plan state hides them from the legs above
    for plan in plans:
        if plan.uav_id is None or plan.route is None or not plan.route.nodes:
            continue
        st = states.get(plan.uav_id)
        if st is None:
            continue
        if plan.state is PlanState.LANDING:
            nid = plan.route.nodes[-1]
        elif plan.state is PlanState.TAKING_OFF:
            nid = plan.route.nodes[0]
        else:
            continue
        npos = net.nodes[nid].position.as_array()
        if float(np.linalg.norm(st.position.as_array() - npos)) <= node_radius:
            if plan.state is PlanState.LANDING:
                occupants.setdefault(nid, []).append((False, plan.uav_id))
            else:
                scales.setdefault(plan.uav_id, 1.0)
                occupants.setdefault(nid, []).append((True, plan.uav_id))

    for members in occupants.values():
        if len(members) < 2:
            continue
        leavers = sorted(uid for app, uid in members if not app)
        approachers = sorted(uid for app, uid in members if app)
        if leavers:
            held = approachers  # let departing traffic clear the node first
        else:
            held = approachers[1:]  # lowest id proceeds
        for uid in held:
            scales[uid] = 0.0

    return scales


# ------------------------------------------------------------ the manager

@dataclass
class _FleetEntry:
    uav_id: str
    home: str
    busy: bool = False


class TrafficManager:
    """Single-owner lifecycle driver for every plan in a run."""

    def __init__(self, net: AirwayNetwork, fleet: list[tuple[str, str]],
                 config: TrafficConfig | None = None):
        self.net = net
        self.config = config if config is not None else TrafficConfig()
        self.fleet = {uid: _FleetEntry(uid, home) for uid, home in fleet}
        if len(self.fleet) != len(fleet):
            raise ValidationError("duplicate uav ids in fleet")
        self.plans: dict[str, FlightPlan] = {}
        self.closed: set[str] = set()
        # vehicle states as of the current step, for landing admission
        self._states_view: dict[str, UavState] = {}

    # ------------------------------------------------------------- intake
    def ingest_demand(self, demand: FlightDemand, now: int = 0) -> FlightPlan:
        plan = plan_mission(demand, self.net, frozenset(self.closed), now=now)
        if plan.id in self.plans:
            raise ValidationError(f"duplicate plan id {plan.id}")
        self.plans[plan.id] = plan
        return plan

    def _assign_uav(self, origin: str) -> str | None:
        candidates = [e.uav_id for e in self.fleet.values()
                      if e.home == origin and not e.busy]
        if not candidates:
            return None
        uid = min(candidates)
        self.fleet[uid].busy = True
        return uid

    def release_uav(self, uav_id: str) -> None:
        entry = self.fleet.get(uav_id)
        if entry is not None:
            entry.busy = False

    def abort_plan(self, plan_id: str, now: int, reason: str) -> None:
        """Force a plan into ABORTED, e.g. after a collision."""
        plan = self.plans.get(plan_id)
        if plan is not None and not plan.terminal:
            self._abort(plan, now, reason)

    # ----------------------------------------------------- airspace events
    def apply_airspace_update(self, closed_airways, affected_plan_ids, now: int) -> None:
        """Record new closures and flag the plans the authority named."""
        self.closed = set(closed_airways)
        for pid in affected_plan_ids:
            plan = self.plans.get(pid)
            if plan is None or plan.terminal:
                continue
            if plan.state in (PlanState.ENROUTE, PlanState.TAKING_OFF):
                plan.replan_needed = True
            elif plan.state in (PlanState.APPROVED, PlanState.SUBMITTED):
                # back to the submission queue; route will be rebuilt
                if plan.state is PlanState.APPROVED:
                    plan.transition(PlanState.SUBMITTED, now, "revoked by airspace change")
                plan.replan_needed = True
                plan.retry_tick = now + 1

    # -------------------------------------------------------- lifecycle
    def advance_lifecycle(self, plan: FlightPlan, uav_state: UavState | None,
                          decision: ApprovalDecision | None, now: int):
        """Advance one plan by one tick.

        Returns (submission | None, setpoint | None). Submissions go to the
        authority over the bus; the setpoint drives the plan's UAV this
        tick. Terminal plans return (None, None).
        """
        if plan.terminal:
            return None, None
        cfg = self.config

        if decision is not None:
            self._apply_decision(plan, decision, now)
            if plan.terminal:
                return None, None

        if plan.state is PlanState.DRAFT:
            if plan.uav_id is None:
                plan.uav_id = self._assign_uav(plan.origin)
            if plan.uav_id is None:
                return None, None  # no idle vehicle yet; retry next tick
            plan.transition(PlanState.SUBMITTED, now, "submitted")
            return self._submit(plan, now), None

        if plan.state is PlanState.SUBMITTED:
            if plan.replan_needed:
                plan.replan_needed = False
                route = shortest_route(self.net, plan.origin, plan.destination,
                                       frozenset(self.closed))
                if route is None:
                    self._abort(plan, now, "unreachable")
                    return None, None
                plan.route = route
                return self._submit(plan, now), None
            if plan.retry_tick is not None and now >= plan.retry_tick:
                plan.retry_tick = None
                return self._submit(plan, now), None
            if (plan.retry_tick is None and plan.last_submit_tick is not None
                    and now - plan.last_submit_tick >= cfg.resubmit_after):
                # decision lost in transit; ask again
                return self._submit(plan, now), None
            return None, None

        if plan.state is PlanState.APPROVED:
            if now >= plan.assigned_departure:
                plan.transition(PlanState.TAKING_OFF, now, f"uav {plan.uav_id}")
            return None, None

        if uav_state is None:
            return None, None

        if plan.state is PlanState.TAKING_OFF:
            top = self.net.nodes[plan.route.nodes[0]].position
            ground = self.net.airports[plan.origin].ground_position
            target = LocalPoint(ground.east, ground.north, top.up)
            if abs(uav_state.position.up - top.up) <= cfg.climb_tolerance:
                plan.transition(PlanState.ENROUTE, now, "climb complete")
                plan.progress = 0
            else:
                return None, ControlSetpoint.waypoint(target, yaw=self._leg_yaw(plan, 0))

        if plan.state is PlanState.ENROUTE:
            if plan.replan_needed:
                plan.replan_needed = False
                if not self._replan_enroute(plan, now):
                    return None, None
            route = plan.route
            waypoints = [self.net.nodes[nid].position for nid in route.nodes]
            setpoint, index = track_route(uav_state, waypoints, plan.progress,
                                          acceptance_radius=cfg.acceptance_radius)
            plan.progress = index
            dist_final = uav_state.position.distance_to(waypoints[-1])
            if index == len(route.nodes) - 1 and dist_final <= cfg.acceptance_radius:
                if self._pad_busy(plan):
                    # one lander in the approach cone at a time; hold at the
                    # node until the vehicle below has sunk clear
                    return None, ControlSetpoint.hold(uav_state.position,
                                                      yaw=setpoint.yaw)
                plan.transition(PlanState.LANDING, now, "descending")
            else:
                return None, self._lane_adjusted(plan, uav_state, setpoint)

        if plan.state is PlanState.LANDING:
            ground = self.net.airports[plan.destination].ground_position
            speed = float(np.linalg.norm(uav_state.velocity))
            if (uav_state.position.up <= ground.up + cfg.touchdown_altitude
                    and speed <= cfg.touchdown_speed):
                plan.transition(PlanState.COMPLETED, now, "touchdown")
                return None, None
            return None, ControlSetpoint.waypoint(ground)

        return None, None

    def _apply_decision(self, plan: FlightPlan, decision: ApprovalDecision, now: int) -> None:
        if plan.state is not PlanState.SUBMITTED:
            return
        if decision.verdict is Verdict.APPROVED:
            plan.assigned_departure = decision.assigned_departure
            plan.transition(PlanState.APPROVED, now, f"departure {decision.assigned_departure}")
        elif decision.verdict is Verdict.DEFERRED:
            plan.retry_tick = decision.retry_tick if decision.retry_tick is not None else now + 1
        else:  # rejected: try an alternate route before giving up
            if decision.reason == "airway_closed":
                plan.replan_needed = True
            else:
                self._abort(plan, now, f"rejected:{decision.reason}")

    def _submit(self, plan: FlightPlan, now: int) -> PlanSubmission:
        plan.last_submit_tick = now
        return plan.submission()

    def _abort(self, plan: FlightPlan, now: int, reason: str) -> None:
        plan.abort_reason = reason
        plan.transition(PlanState.ABORTED, now, reason)
        if plan.uav_id is not None:
            self.release_uav(plan.uav_id)

    def _replan_enroute(self, plan: FlightPlan, now: int) -> bool:
        """Reroute from the node currently being approached."""
        route = plan.route
        from_node = route.nodes[min(plan.progress, len(route.nodes) - 1)]
        dest_node = self.net.airports[plan.destination].linked_node
        new_route = shortest_node_route(self.net, from_node, dest_node,
                                        frozenset(self.closed))
        if new_route is None:
            self._abort(plan, now, "unreachable")
            return False
        plan.route = new_route
        plan.progress = 0
        plan.history.append((now, plan.state.value, f"replanned via {from_node}"))
        return True

    def _leg_yaw(self, plan: FlightPlan, index: int) -> float:
        route = plan.route
        if route is None or len(route.nodes) < 2:
            return 0.0
        index = min(index, len(route.nodes) - 2)
        a = self.net.nodes[route.nodes[index]].position
        b = self.net.nodes[route.nodes[index + 1]].position
        return math.atan2(b.north - a.north, b.east - a.east)

    def _lane_adjusted(self, plan: FlightPlan, uav_state: UavState,
                       setpoint: ControlSetpoint) -> ControlSetpoint:
        """Shift a waypoint target right of the leg direction by lane_offset."""
        off = self.config.lane_offset
        k = plan.progress
        route = plan.route
        if (off == 0.0 or setpoint.mode is not SetpointMode.WAYPOINT
                or not 1 <= k < len(route.nodes)):
            return setpoint
        a = self.net.nodes[route.nodes[k - 1]].position
        b = self.net.nodes[route.nodes[k]].position
        de, dn = b.east - a.east, b.north - a.north
        norm = math.hypot(de, dn)
        if norm < 1e-9:
            return setpoint
        # Blend the offset out on final approach so the acceptance sphere of
        # the true waypoint stays reachable; node entry is serialized by the
        # mutex there anyway.
        dist = math.hypot(b.east - uav_state.position.east,
                          b.north - uav_state.position.north)
        taper = max(4.0, 3.0 * off)
        eff = off * min(1.0, dist / taper)
        # right of travel in the EN plane
        re_, rn = dn / norm, -de / norm
        tx, ty, tz = setpoint.target
        return ControlSetpoint.waypoint(
            LocalPoint(tx + re_ * eff, ty + rn * eff, tz),
            yaw=setpoint.yaw, speed_limit=setpoint.speed_limit)

    # ------------------------------------------------------------ fleet step
    def step(self, now: int, states: dict[str, UavState],
             decisions: dict[str, ApprovalDecision]):
        """Advance every plan one tick.

        Returns (submissions, setpoints) where setpoints maps uav id to the
        separation-scaled ControlSetpoint for this tick.
        """
        submissions: list[PlanSubmission] = []
        raw: dict[str, ControlSetpoint] = {}
        for pid in sorted(self.plans):
            plan = self.plans[pid]
            if plan.terminal:
                continue
            st = states.get(plan.uav_id) if plan.uav_id is not None else None
            sub, sp = self.advance_lifecycle(plan, st, decisions.get(pid), now)
            if sub is not None:
                submissions.append(sub)
            if sp is not None and plan.uav_id is not None:
                raw[plan.uav_id] = sp

        scales = enforce_separation(self.plans.values(), states, self.net,
                                    self.config.s_min, self.config.node_radius)
        setpoints: dict[str, ControlSetpoint] = {}
        for uid, sp in raw.items():
            scale = scales.get(uid, 1.0)
            if sp.mode is SetpointMode.WAYPOINT:
                base = sp.speed_limit if sp.speed_limit is not None else self.config.cruise_speed
                limited = max(0.0, base * scale)
                if limited <= 1e-6:
                    sp = ControlSetpoint.hold(states[uid].position, yaw=sp.yaw)
                else:
                    sp = ControlSetpoint.waypoint(
                        LocalPoint(*sp.target), yaw=sp.yaw, speed_limit=limited)
            setpoints[uid] = sp
        return submissions, setpoints

    # ------------------------------------------------------------- queries
    def active_plans(self) -> list[FlightPlan]:
        return [p for p in self.plans.values() if not p.terminal]

    def all_terminal(self) -> bool:
        return all(p.terminal for p in self.plans.values())
