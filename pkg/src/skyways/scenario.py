"""Scenario documents: load, validate, and normalize run inputs.

A scenario is one JSON document with fixed top-level keys. Validation
collects every violation instead of stopping at the first so a CLI check
can print the full list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from .anomaly import (
    Anomaly,
    anomaly_from_payload,
    obstacle_from_payload,
    zone_from_payload,
)
from .avoidance import HistogramConfig, SpeedPolicy
from .dynamics import UavParams
from .geometry import NoFlyZone, Obstacle
from .network import (
    Airport,
    Airway,
    AirwayNetwork,
    AirwayNode,
    generate_grid_network,
    validate_network,
)
from .sensing import LidarConfig
from .traffic import FlightDemand
from .world import GeodeticPoint, LocalPoint, SimClock, ValidationError

TOP_LEVEL_KEYS = frozenset(
    {"datum", "map", "network", "fleet", "demands", "anomalies",
     "seed", "clock", "wind"})

_SEED_MAX = 2 ** 64


class ScenarioError(ValidationError):
    """Carries the full violation list for reporting."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class FleetEntry:
    uav_id: str
    params: UavParams
    home: str


@dataclass(frozen=True)
class AvoidanceProfile:
    """Guidance tuning a map may carry for the terrain it describes.

    Dense obstacle fields want wider steering margins than open airspace;
    shipping the profile inside the scenario keeps a run reproducible from
    the file alone. Unset fields fall back to engine defaults.
    """

    s_max: int | None = None
    corridor_tolerance: float | None = None
    histogram: HistogramConfig | None = None
    lidar: LidarConfig | None = None
    speed: SpeedPolicy | None = None


@dataclass
class Scenario:
    datum: GeodeticPoint
    map_name: str
    network: AirwayNetwork
    fleet: list[FleetEntry]
    demands: list[FlightDemand]
    anomalies: list[Anomaly]
    seed: int
    clock: SimClock
    wind_base: np.ndarray
    obstacles: list[Obstacle] = field(default_factory=list)
    zones: list[NoFlyZone] = field(default_factory=list)
    avoidance: AvoidanceProfile = field(default_factory=AvoidanceProfile)


def _point(raw) -> LocalPoint:
    e, n, u = (float(v) for v in raw)
    return LocalPoint(e, n, u)


def _build_network(raw: dict) -> AirwayNetwork:
    if "grid" in raw:
        return generate_grid_network(**raw["grid"])
    nodes = [AirwayNode(d["id"], _point(d["position"])) for d in raw["nodes"]]
    airports = [Airport(d["id"], _point(d["position"]), d["linked_node"],
                        pads=d.get("pads", 1)) for d in raw["airports"]]
    airways = [Airway(d["id"], d["a"], d["b"],
                      corridor_radius=d.get("corridor_radius", 10.0),
                      bidirectional=d.get("bidirectional", True),
                      capacity=d.get("capacity", 4)) for d in raw["airways"]]
    return AirwayNetwork(nodes, airports, airways)


def _params_from(overrides: dict) -> UavParams:
    allowed = {f.name for f in dc_fields(UavParams)}
    unknown = set(overrides) - allowed
    if unknown:
        raise ValidationError(f"unknown UAV parameters: {sorted(unknown)}")
    coerced = {k: (tuple(map(tuple, v)) if k == "inertia" else v)
               for k, v in overrides.items()}
    return UavParams(**coerced)


def _config_from(cls, overrides: dict):
    allowed = {f.name for f in dc_fields(cls)}
    unknown = set(overrides) - allowed
    if unknown:
        raise ValidationError(
            f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**overrides)


def _avoidance_from(raw: dict) -> AvoidanceProfile:
    allowed = {"s_max", "corridor_tolerance", "histogram", "lidar", "speed"}
    unknown = set(raw) - allowed
    if unknown:
        raise ValidationError(f"unknown avoidance fields: {sorted(unknown)}")
    s_max = raw.get("s_max")
    if s_max is not None and (not isinstance(s_max, int) or s_max < 1):
        raise ValidationError(f"s_max must be a positive integer: {s_max!r}")
    tol = raw.get("corridor_tolerance")
    if tol is not None:
        tol = float(tol)
        if tol <= 0.0:
            raise ValidationError("corridor_tolerance must be positive")
    return AvoidanceProfile(
        s_max=s_max,
        corridor_tolerance=tol,
        histogram=(_config_from(HistogramConfig, raw["histogram"])
                   if raw.get("histogram") is not None else None),
        lidar=(_config_from(LidarConfig, raw["lidar"])
               if raw.get("lidar") is not None else None),
        speed=(_config_from(SpeedPolicy, raw["speed"])
               if raw.get("speed") is not None else None),
    )


def _parse(doc: dict) -> tuple[Scenario | None, list[str]]:
    bad: list[str] = []
    if not isinstance(doc, dict):
        return None, ["scenario document must be a JSON object"]

    unknown = set(doc) - TOP_LEVEL_KEYS
    if unknown:
        bad.append(f"unknown top-level keys: {sorted(unknown)}")

    # seed: required, no implicit randomness
    seed = doc.get("seed")
    if seed is None:
        bad.append("seed is required")
        seed = 0
    elif not isinstance(seed, int) or not 0 <= seed < _SEED_MAX:
        bad.append(f"seed must be an integer in [0, 2^64): {seed!r}")
        seed = 0

    datum = GeodeticPoint(0.0, 0.0, 0.0)
    try:
        d = doc.get("datum") or {}
        datum = GeodeticPoint(float(d.get("lat", 0.0)), float(d.get("lon", 0.0)),
                              float(d.get("alt", 0.0)))
    except (ValidationError, TypeError, ValueError) as exc:
        bad.append(f"datum: {exc}")

    net = None
    try:
        net = _build_network(doc.get("network") or {})
    except (ValidationError, KeyError, TypeError, ValueError) as exc:
        bad.append(f"network: {exc!r}" if isinstance(exc, KeyError)
                   else f"network: {exc}")
    else:
        for v in validate_network(net):
            bad.append(f"network: {v}")

    map_doc = doc.get("map") or {}
    map_name = map_doc.get("name", "unnamed")
    obstacles: list[Obstacle] = []
    zones: list[NoFlyZone] = []
    for i, raw in enumerate(map_doc.get("obstacles", [])):
        try:
            obstacles.append(obstacle_from_payload(raw))
        except (ValidationError, KeyError, TypeError, ValueError) as exc:
            bad.append(f"map.obstacles[{i}]: {exc}")
    if len({o.id for o in obstacles}) != len(obstacles):
        bad.append("map.obstacles: duplicate ids")
    for i, raw in enumerate(map_doc.get("zones", [])):
        try:
            zones.append(zone_from_payload(raw))
        except (ValidationError, KeyError, TypeError, ValueError) as exc:
            bad.append(f"map.zones[{i}]: {exc}")
    avoidance = AvoidanceProfile()
    if map_doc.get("avoidance") is not None:
        try:
            avoidance = _avoidance_from(map_doc["avoidance"])
        except (ValidationError, KeyError, TypeError, ValueError) as exc:
            bad.append(f"map.avoidance: {exc}")

    fleet: list[FleetEntry] = []
    seen_uavs = set()
    for i, raw in enumerate(doc.get("fleet", [])):
        try:
            uid = raw["id"]
            entry = FleetEntry(uid, _params_from(raw.get("params", {})),
                               raw["home"])
        except (ValidationError, KeyError, TypeError, ValueError) as exc:
            bad.append(f"fleet[{i}]: {exc}")
            continue
        if uid in seen_uavs:
            bad.append(f"fleet[{i}]: duplicate uav id {uid!r}")
        seen_uavs.add(uid)
        if net is not None and entry.home not in net.airports:
            bad.append(f"fleet[{i}]: unknown home airport {entry.home!r}")
        fleet.append(entry)

    demands: list[FlightDemand] = []
    seen_demands = set()
    for i, raw in enumerate(doc.get("demands", [])):
        try:
            dem = FlightDemand(raw["id"], raw["origin"], raw["destination"],
                               requested_departure=raw.get("departure", 0))
        except (ValidationError, KeyError, TypeError, ValueError) as exc:
            bad.append(f"demands[{i}]: {exc}")
            continue
        if dem.id in seen_demands:
            bad.append(f"demands[{i}]: duplicate demand id {dem.id!r}")
        seen_demands.add(dem.id)
        if net is not None:
            for role, airport in (("origin", dem.origin),
                                  ("destination", dem.destination)):
                if airport not in net.airports:
                    bad.append(f"demands[{i}]: unknown {role} airport {airport!r}")
        demands.append(dem)

    anomalies: list[Anomaly] = []
    for i, raw in enumerate(doc.get("anomalies", [])):
        try:
            anomalies.append(anomaly_from_payload(raw))
        except (ValidationError, KeyError, TypeError, ValueError) as exc:
            bad.append(f"anomalies[{i}]: {exc}")

    clock = SimClock()
    try:
        c = doc.get("clock") or {}
        clock = SimClock(tick_duration=c.get("tick_duration", 1.0 / 30.0),
                         physics_substeps=c.get("physics_substeps", 8))
    except (ValidationError, TypeError) as exc:
        bad.append(f"clock: {exc}")

    wind = np.zeros(3)
    raw_wind = doc.get("wind", [0.0, 0.0, 0.0])
    try:
        wind = np.asarray(raw_wind, dtype=float)
        if wind.shape != (3,) or not np.all(np.isfinite(wind)):
            raise ValidationError("wind must be 3 finite components")
    except (ValidationError, TypeError, ValueError) as exc:
        bad.append(f"wind: {exc}")
        wind = np.zeros(3)

    if bad or net is None:
        return None, bad
    return Scenario(datum, map_name, net, fleet, demands, anomalies,
                    seed, clock, wind, obstacles, zones, avoidance), bad


def validate_scenario(doc: dict) -> list[str]:
    """All violations found in the document; empty means loadable."""
    _, bad = _parse(doc)
    return bad


def load_scenario(source) -> Scenario:
    """Load from a dict, a JSON string, or a file path.

    Raises ScenarioError carrying every violation when invalid.
    """
    if isinstance(source, dict):
        doc = source
    else:
        text = Path(source).read_text() if isinstance(source, Path) or (
            isinstance(source, str) and not source.lstrip().startswith("{")
        ) else source
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioError([f"not valid JSON: {exc}"]) from exc
    scenario, bad = _parse(doc)
    if bad:
        raise ScenarioError(bad)
    return scenario
