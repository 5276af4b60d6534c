"""Fault injection.

Anomalies come from two sources: a scenario schedule applied when the clock
reaches each onset tick, and live requests forwarded by the gateway. Both
funnel through the same dispatch so effects and logging cannot diverge.
Bounded anomalies record enough state to restore the touched fields when
their duration expires.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from .authority import AirspaceAuthority, ControlOrder
from .bus import LinkModel, MessageBus
from .dynamics import UavState
from .geometry import Box, Cylinder, NoFlyZone, Obstacle, Sphere
from .sensing import LidarConfig
from .world import ValidationError

CATEGORIES = {
    "control": frozenset({"close_airway", "activate_nfz", "ground_stop"}),
    "environment": frozenset({"wind_gust", "spawn_obstacle", "fog_lidar"}),
    "uav": frozenset({"motor_failure", "propeller_breakage"}),
    "communication": frozenset({"set_link"}),
}

MOTOR_COUNT = 4


def _require(params: dict, key: str, kind: str):
    if key not in params:
        raise ValidationError(f"{kind} requires parameter {key!r}")
    return params[key]


def _validate_params(category: str, kind: str, params: dict) -> None:
    if category == "control":
        if kind == "activate_nfz":
            zone = _require(params, "zone", kind)
            if not isinstance(zone, NoFlyZone):
                raise ValidationError("zone parameter must be a NoFlyZone")
        else:
            target = _require(params, "target", kind)
            if not isinstance(target, str) or not target:
                raise ValidationError(f"{kind} target must be a non-empty id")
    elif kind == "wind_gust":
        vec = np.asarray(_require(params, "vector", kind), dtype=float)
        if vec.shape != (3,) or not np.all(np.isfinite(vec)):
            raise ValidationError("wind_gust vector must be 3 finite components")
    elif kind == "spawn_obstacle":
        obs = _require(params, "obstacle", kind)
        if not isinstance(obs, Obstacle):
            raise ValidationError("obstacle parameter must be an Obstacle")
    elif kind == "fog_lidar":
        dropout = params.get("dropout_prob", 0.0)
        scale = params.get("range_scale", 1.0)
        if not 0.0 <= dropout < 1.0:
            raise ValidationError(f"dropout_prob out of [0,1): {dropout}")
        if not 0.0 < scale <= 1.0:
            raise ValidationError(f"range_scale out of (0,1]: {scale}")
    elif kind in ("motor_failure", "propeller_breakage"):
        _require(params, "uav", kind)
        motor = _require(params, "motor", kind)
        if not isinstance(motor, int) or not 0 <= motor < MOTOR_COUNT:
            raise ValidationError(f"motor index out of range: {motor}")
        if kind == "motor_failure":
            residual = _require(params, "residual", kind)
            if not 0.0 <= residual < 1.0:
                raise ValidationError(f"residual out of [0,1): {residual}")
    elif kind == "set_link":
        prefix = _require(params, "prefix", kind)
        if not isinstance(prefix, str) or not prefix or "/" in prefix:
            raise ValidationError("prefix must be a single topic segment")
        if not isinstance(_require(params, "link", kind), LinkModel):
            raise ValidationError("link parameter must be a LinkModel")


@dataclass(frozen=True)
class Anomaly:
    """One typed fault with onset tick and optional duration (None = permanent)."""

    id: str
    category: str
    kind: str
    params: dict = field(default_factory=dict)
    onset: int = 0
    duration: int | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("anomaly id must be non-empty")
        kinds = CATEGORIES.get(self.category)
        if kinds is None:
            raise ValidationError(f"unknown anomaly category {self.category!r}")
        if self.kind not in kinds:
            raise ValidationError(
                f"kind {self.kind!r} not valid for category {self.category!r}")
        if self.onset < 0:
            raise ValidationError(f"onset must be >= 0: {self.onset}")
        if self.duration is not None and self.duration < 1:
            raise ValidationError(f"duration must be >= 1 tick: {self.duration}")
        _validate_params(self.category, self.kind, self.params)

    @property
    def bounded(self) -> bool:
        return self.duration is not None


@dataclass
class AnomalyLogEntry:
    """Outcome record for one injection attempt."""

    anomaly_id: str
    applied_tick: int
    reverted_tick: int | None = None
    affected: list[str] = field(default_factory=list)
    error: str | None = None

    def to_payload(self) -> dict:
        return {
            "anomaly_id": self.anomaly_id,
            "applied_tick": self.applied_tick,
            "reverted_tick": self.reverted_tick,
            "affected": list(self.affected),
            "error": self.error,
        }


@dataclass
class FogState:
    """Mutable LiDAR degradation shared with the engine's sensing step."""

    dropout_prob: float = 0.0
    range_scale: float = 1.0

    def effective_config(self, config: LidarConfig) -> LidarConfig:
        if self.range_scale == 1.0:
            return config
        return replace(config, max_range=config.max_range * self.range_scale)


@dataclass
class WorldHooks:
    """The mutable world surface anomalies are allowed to touch."""

    authority: AirspaceAuthority | None = None
    bus: MessageBus | None = None
    wind: np.ndarray = field(default_factory=lambda: np.zeros(3))
    obstacles: list[Obstacle] = field(default_factory=list)
    fog: FogState = field(default_factory=FogState)
    uav_states: dict[str, UavState] = field(default_factory=dict)

    def __post_init__(self):
        self.wind = np.asarray(self.wind, dtype=float)


@dataclass
class _ActiveAnomaly:
    anomaly: Anomaly
    entry: AnomalyLogEntry
    revert_tick: int
    undo: Callable[[], None]


class AnomalyInjector:
    """Applies scheduled and live anomalies and reverts the bounded ones."""

    def __init__(self, hooks: WorldHooks, schedule: list[Anomaly] | None = None):
        self.hooks = hooks
        self._pending = sorted(schedule or [], key=lambda a: (a.onset, a.id))
        self._active: list[_ActiveAnomaly] = []
        self.log: list[AnomalyLogEntry] = []

    # ------------------------------------------------------------ tick hook
    def step(self, now: int) -> tuple[list[AnomalyLogEntry], list[AnomalyLogEntry]]:
        """Revert expired anomalies, then apply any whose onset has arrived.

        Returns (applied, reverted) entries for this tick.
        """
        reverted = []
        for act in [a for a in self._active if now >= a.revert_tick]:
            act.undo()
            act.entry.reverted_tick = now
            self._active.remove(act)
            reverted.append(act.entry)
        applied = []
        while self._pending and self._pending[0].onset <= now:
            applied.append(self.apply_anomaly(self._pending.pop(0), now))
        return applied, reverted

    # ------------------------------------------------------------- dispatch
    def apply_anomaly(self, a: Anomaly, now: int) -> AnomalyLogEntry:
        """Apply one anomaly; failures are recorded, never raised."""
        entry = AnomalyLogEntry(a.id, applied_tick=now)
        try:
            undo = self._dispatch(a, entry, now)
        except (ValidationError, LookupError) as exc:
            entry.error = str(exc)
        else:
            if a.bounded:
                self._active.append(
                    _ActiveAnomaly(a, entry, now + a.duration, undo))
        self.log.append(entry)
        return entry

    def _dispatch(self, a: Anomaly, entry: AnomalyLogEntry,
                  now: int) -> Callable[[], None]:
        hooks = self.hooks
        p = a.params

        if a.category == "control":
            auth = hooks.authority
            if auth is None:
                raise ValidationError("no authority attached")
            until = now + a.duration if a.bounded else None
            order = ControlOrder(a.kind, target=p.get("target"),
                                 zone=p.get("zone"), until=until)
            entry.affected = auth.issue_airspace_control(order, now)
            reverse = {"close_airway": "reopen_airway",
                       "activate_nfz": "deactivate_nfz",
                       "ground_stop": "lift_ground_stop"}[a.kind]
            target = p["zone"].id if a.kind == "activate_nfz" else p["target"]

            def undo_control():
                auth.issue_airspace_control(
                    ControlOrder(reverse, target=target), now + a.duration)
            return undo_control

        if a.kind == "wind_gust":
            vec = np.asarray(p["vector"], dtype=float)
            hooks.wind += vec

            def undo_wind():
                hooks.wind -= vec
            return undo_wind

        if a.kind == "spawn_obstacle":
            obs: Obstacle = p["obstacle"]
            if any(o.id == obs.id for o in hooks.obstacles):
                raise ValidationError(f"duplicate obstacle id {obs.id!r}")
            hooks.obstacles.append(obs)
            entry.affected = [obs.id]

            def undo_obstacle():
                hooks.obstacles[:] = [o for o in hooks.obstacles
                                      if o.id != obs.id]
            return undo_obstacle

        if a.kind == "fog_lidar":
            fog = hooks.fog
            prev = (fog.dropout_prob, fog.range_scale)
            fog.dropout_prob = p.get("dropout_prob", 0.0)
            fog.range_scale = p.get("range_scale", 1.0)

            def undo_fog():
                fog.dropout_prob, fog.range_scale = prev
            return undo_fog

        if a.kind in ("motor_failure", "propeller_breakage"):
            uid = p["uav"]
            motor = p["motor"]
            state = hooks.uav_states.get(uid)
            if state is None:
                raise LookupError(f"unknown target: uav {uid!r}")
            residual = 0.0 if a.kind == "propeller_breakage" else p["residual"]
            prev_health = float(state.health[motor])
            state.health[motor] = residual
            entry.affected = [uid]

            def undo_motor():
                # the vehicle may have been reclaimed before the revert tick
                st = hooks.uav_states.get(uid)
                if st is not None:
                    st.health[motor] = prev_health
            return undo_motor

        if a.kind == "set_link":
            bus = hooks.bus
            if bus is None:
                raise ValidationError("no bus attached")
            prefix = p["prefix"]
            prev_model = bus.get_link(prefix)
            bus.set_link(prefix, p["link"])
            entry.affected = [prefix]

            def undo_link():
                bus.set_link(prefix, prev_model)
            return undo_link

        raise ValidationError(f"unhandled anomaly kind {a.kind!r}")

    # ------------------------------------------------------------ live path
    def live_inject(self, payload: dict, now: int
                    ) -> tuple[Anomaly | None, AnomalyLogEntry | None]:
        """Apply a gateway request immediately; ack or reject on the bus."""
        try:
            a = anomaly_from_payload(payload, onset=now)
            self._check_targets(a)
        except (ValidationError, LookupError, KeyError, TypeError) as exc:
            self._publish("anomaly/rejected",
                          {"request": payload.get("id"), "reason": str(exc)}, now)
            return None, None
        entry = self.apply_anomaly(a, now)
        if entry.error is not None:
            self._publish("anomaly/rejected",
                          {"request": a.id, "reason": entry.error}, now)
            return a, entry
        self._publish("anomaly/applied", entry.to_payload(), now)
        return a, entry

    def _check_targets(self, a: Anomaly) -> None:
        """Pre-flight existence checks so live requests reject cleanly."""
        p = a.params
        auth = self.hooks.authority
        if a.kind in ("motor_failure", "propeller_breakage"):
            if p["uav"] not in self.hooks.uav_states:
                raise LookupError("unknown target")
        elif a.kind in ("close_airway",):
            if auth is not None and p["target"] not in auth.net.airways:
                raise LookupError("unknown target")
        elif a.kind == "ground_stop":
            if auth is not None and p["target"] not in auth.net.airports:
                raise LookupError("unknown target")

    def _publish(self, topic: str, payload: dict, now: int) -> None:
        if self.hooks.bus is not None:
            self.hooks.bus.publish(topic, payload, now)

    @property
    def active_count(self) -> int:
        return len(self._active)


# ------------------------------------------------------- payload conversion

_SHAPE_BUILDERS = {
    "sphere": lambda d: Sphere(d["center"], d["radius"]),
    "box": lambda d: Box(d["min_corner"], d["max_corner"]),
    "cylinder": lambda d: Cylinder(d["center"], d["radius"], d["height"]),
}


def shape_from_payload(d: dict):
    kind = d.get("type")
    builder = _SHAPE_BUILDERS.get(kind)
    if builder is None:
        raise ValidationError(f"unknown shape type {kind!r}")
    return builder(d)


def shape_to_payload(shape) -> dict:
    if isinstance(shape, Sphere):
        return {"type": "sphere", "center": list(shape.center),
                "radius": shape.radius}
    if isinstance(shape, Box):
        return {"type": "box", "min_corner": list(shape.min_corner),
                "max_corner": list(shape.max_corner)}
    if isinstance(shape, Cylinder):
        return {"type": "cylinder", "center": list(shape.center),
                "radius": shape.radius, "height": shape.height}
    raise ValidationError(f"unknown shape {type(shape).__name__}")


def obstacle_from_payload(d: dict) -> Obstacle:
    return Obstacle(d["id"], shape_from_payload(d["shape"]),
                    dynamic=d.get("dynamic", False),
                    velocity=d.get("velocity", (0.0, 0.0, 0.0)))


def obstacle_to_payload(obs: Obstacle) -> dict:
    return {"id": obs.id, "shape": shape_to_payload(obs.shape),
            "dynamic": obs.dynamic, "velocity": list(obs.velocity)}


def zone_from_payload(d: dict) -> NoFlyZone:
    return NoFlyZone(d["id"], [tuple(v) for v in d["footprint"]],
                     d["floor"], d["ceiling"],
                     d.get("active_from", 0), d.get("active_until"))


def zone_to_payload(z: NoFlyZone) -> dict:
    return {"id": z.id, "footprint": [list(v) for v in z.footprint],
            "floor": z.floor, "ceiling": z.ceiling,
            "active_from": z.active_from, "active_until": z.active_until}


def link_from_payload(d: dict) -> LinkModel:
    return LinkModel(base_delay=d.get("base_delay", 0),
                     jitter=d.get("jitter", 0),
                     loss_prob=d.get("loss_prob", 0.0),
                     queue_capacity=d.get("queue_capacity", 256),
                     service_rate=d.get("service_rate", 32))


def link_to_payload(m: LinkModel) -> dict:
    return {"base_delay": m.base_delay, "jitter": m.jitter,
            "loss_prob": m.loss_prob, "queue_capacity": m.queue_capacity,
            "service_rate": m.service_rate}


_PARAM_DECODERS: dict[str, Callable[[Any], Any]] = {
    "zone": zone_from_payload,
    "obstacle": obstacle_from_payload,
    "link": link_from_payload,
}

_PARAM_ENCODERS: dict[str, Callable[[Any], Any]] = {
    "zone": zone_to_payload,
    "obstacle": obstacle_to_payload,
    "link": link_to_payload,
}


def anomaly_from_payload(d: dict, onset: int | None = None) -> Anomaly:
    """Build an Anomaly from a wire/scenario document.

    Nested structures (zone, obstacle, link) are decoded from plain dicts.
    ``onset`` overrides the document's value for live injections.
    """
    params = {}
    for key, value in dict(d.get("params", {})).items():
        decode = _PARAM_DECODERS.get(key)
        if decode is not None and isinstance(value, dict):
            value = decode(value)
        if key == "vector" and isinstance(value, list):
            value = tuple(value)
        params[key] = value
    duration = d.get("duration")
    return Anomaly(
        id=d["id"],
        category=d["category"],
        kind=d["kind"],
        params=params,
        onset=onset if onset is not None else int(d.get("onset", 0)),
        duration=int(duration) if duration is not None else None,
    )


def anomaly_to_payload(a: Anomaly) -> dict:
    params = {}
    for key, value in a.params.items():
        encode = _PARAM_ENCODERS.get(key)
        if encode is not None and not isinstance(value, dict):
            value = encode(value)
        elif isinstance(value, tuple):
            value = list(value)
        elif isinstance(value, np.ndarray):
            value = value.tolist()
        params[key] = value
    return {"id": a.id, "category": a.category, "kind": a.kind,
            "params": params, "onset": a.onset, "duration": a.duration}
