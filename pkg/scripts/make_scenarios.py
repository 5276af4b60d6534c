#!/usr/bin/env python3
"""Regenerate the shipped scenario files under scenarios/.

Three documents come out of here:

- smallcity_100.json: a 45-node city lattice (5 x 9, nine street segments
  removed) with 13 airports and 100 staggered quadrotor missions. Departures
  from any one airport are spaced wider than the authority's separation
  window so approvals land exactly on the requested ticks, and early waves
  fly the longest routes so the whole fleet is airborne at once before the
  first touchdown.
- smallcity_100_faults.json: the same city plus a scheduled mid-flight
  motor derating, a temporary airway closure that forces replans, and a
  short lossy-link window that makes the run seed-sensitive.
- obstacle_run_vfh.json: a single 400 m corridor at 18 m altitude crossing
  four obstacle sections (split wall, cylinder cluster, sphere, staggered
  S-turn) for the LiDAR avoidance stack.

The script is deterministic: running it twice yields identical files.
"""

from __future__ import annotations

import json
import sys
from collections import deque
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from skyways.scenario import validate_scenario  # noqa: E402

ROWS, COLS = 5, 9
SPACING = 150.0
ALTITUDE = 120.0

# street segments removed from the full lattice (76 - 9 = 67 airways)
REMOVED = {"H11", "H15", "H32", "H36", "V03", "V17", "V21", "V25", "V33"}

# row-major (row, col) picks, spread so every district has a pad
AIRPORT_CELLS = [(0, 0), (0, 4), (0, 8), (1, 2), (1, 6), (2, 0), (2, 4),
                 (2, 8), (3, 2), (3, 6), (4, 0), (4, 4), (4, 8)]

FIRST_DEPARTURE = 60
WAVE_SPACING = 400          # > authority separation (300), per origin
ORIGIN_SKEW = 7             # ticks between same-wave departures
WAVES = 8
# minimum route hops per wave: early departures fly far so nobody lands
# before the last wave is airborne (full-fleet concurrency window)
MIN_HOPS = [6, 5, 5, 4, 3, 3, 2, 2]


def _node_id(r: int, c: int) -> str:
    return f"N{r}{c}"


def build_city_network() -> dict:
    nodes = [{"id": _node_id(r, c),
              "position": [c * SPACING, r * SPACING, ALTITUDE]}
             for r in range(ROWS) for c in range(COLS)]
    airways = []
    for r in range(ROWS):
        for c in range(COLS - 1):
            wid = f"H{r}{c}"
            if wid not in REMOVED:
                airways.append({"id": wid, "a": _node_id(r, c),
                                "b": _node_id(r, c + 1),
                                "corridor_radius": 10.0,
                                "bidirectional": True, "capacity": 8})
    for r in range(ROWS - 1):
        for c in range(COLS):
            wid = f"V{r}{c}"
            if wid not in REMOVED:
                airways.append({"id": wid, "a": _node_id(r, c),
                                "b": _node_id(r + 1, c),
                                "corridor_radius": 10.0,
                                "bidirectional": True, "capacity": 8})
    airports = [{"id": f"A{r}{c}", "position": [c * SPACING, r * SPACING, 0.0],
                 "linked_node": _node_id(r, c), "pads": 1}
                for r, c in AIRPORT_CELLS]
    return {"nodes": nodes, "airports": airports, "airways": airways}


def hop_distances(network: dict, start: str) -> dict[str, int]:
    adj: dict[str, list[str]] = {n["id"]: [] for n in network["nodes"]}
    for w in network["airways"]:
        adj[w["a"]].append(w["b"])
        adj[w["b"]].append(w["a"])
    dist = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def build_city_demands(network: dict) -> tuple[list[dict], list[dict]]:
    airports = network["airports"]
    node_of = {a["id"]: a["linked_node"] for a in airports}
    dist_from = {a["id"]: hop_distances(network, a["linked_node"])
                 for a in airports}

    demands: list[dict] = []
    fleet: list[dict] = []
    counts = {a["id"]: 0 for a in airports}
    seq = 0
    for wave in range(WAVES):
        for j, apt in enumerate(airports):
            origin = apt["id"]
            # 13 airports x 8 waves = 104 slots; trim the last wave at the
            # final four airports to land exactly on 100 missions
            if wave == WAVES - 1 and j >= len(airports) - 4:
                continue
            need = MIN_HOPS[wave]
            cands = [b["id"] for b in airports
                     if b["id"] != origin
                     and dist_from[origin].get(node_of[b["id"]], 0) >= need]
            if not cands:
                raise SystemExit(f"no destination >= {need} hops from {origin}")
            dest = cands[(3 * j + 5 * wave) % len(cands)]
            seq += 1
            counts[origin] += 1
            demands.append({"id": f"D{seq:03d}", "origin": origin,
                            "destination": dest,
                            "departure": FIRST_DEPARTURE + WAVE_SPACING * wave
                            + ORIGIN_SKEW * j})
    for apt in airports:
        for k in range(1, counts[apt["id"]] + 1):
            fleet.append({"id": f"U-{apt['id']}-{k}", "home": apt["id"]})
    return demands, fleet


def build_city(seed: int) -> dict:
    network = build_city_network()
    demands, fleet = build_city_demands(network)
    return {
        "datum": {"lat": 31.0, "lon": 121.0, "alt": 0.0},
        "seed": seed,
        "map": {"name": "smallcity", "obstacles": [], "zones": []},
        "network": network,
        "fleet": fleet,
        "demands": demands,
        "anomalies": [],
        "clock": {},
        "wind": [0.0, 0.0, 0.0],
    }


def build_city_faults(seed: int) -> dict:
    doc = build_city(seed)
    doc["map"] = {**doc["map"], "name": "smallcity-faults"}
    # U-A00-1 flies the first wave out of A00: airborne well before tick
    # 1500, still enroute on its long route when the derating lands
    doc["anomalies"] = [
        {"id": "MOTOR", "category": "uav", "kind": "motor_failure",
         "params": {"uav": "U-A00-1", "motor": 2, "residual": 0.5},
         "onset": 1500, "duration": None},
        {"id": "CLOSURE", "category": "control", "kind": "close_airway",
         "params": {"target": "H24"},
         "onset": 2200, "duration": 2400},
        {"id": "LOSSY", "category": "communication", "kind": "set_link",
         "params": {"prefix": "uav",
                    "link": {"loss_prob": 0.05, "queue_capacity": 65536,
                             "service_rate": 65536}},
         "onset": 3000, "duration": 300},
    ]
    return doc


def build_obstacle_run(seed: int) -> dict:
    length = 400.0
    alt = 18.0
    obstacles = [
        # section 1: wall split by an offset 20 m gap
        {"id": "WALL-L", "shape": {"type": "box", "min_corner": [84, -30, 0],
                                   "max_corner": [90, -4, 30]}},
        {"id": "WALL-R", "shape": {"type": "box", "min_corner": [84, 16, 0],
                                   "max_corner": [90, 30, 30]}},
        # section 2: cylinder cluster with 10 m lanes between the towers
        {"id": "TOWER-A", "shape": {"type": "cylinder", "center": [168, -18, 0],
                                    "radius": 4.0, "height": 30.0}},
        {"id": "TOWER-B", "shape": {"type": "cylinder", "center": [174, 0, 0],
                                    "radius": 4.0, "height": 30.0}},
        {"id": "TOWER-C", "shape": {"type": "cylinder", "center": [168, 18, 0],
                                    "radius": 4.0, "height": 30.0}},
        # section 3: balloon parked just right of the centerline
        {"id": "BALLOON", "shape": {"type": "sphere", "center": [250, 2, alt],
                                    "radius": 9.0}},
        # section 4: staggered walls forcing an S-turn
        {"id": "STAGGER-L", "shape": {"type": "box",
                                      "min_corner": [314, -40, 0],
                                      "max_corner": [320, 2, 30]}},
        {"id": "STAGGER-R", "shape": {"type": "box",
                                      "min_corner": [334, -2, 0],
                                      "max_corner": [340, 40, 30]}},
    ]
    return {
        "datum": {"lat": 31.0, "lon": 121.0, "alt": 0.0},
        "seed": seed,
        "map": {
            "name": "obstacle-run",
            "obstacles": obstacles,
            "zones": [],
            "avoidance": {
                "s_max": 12,
                "histogram": {"threshold": 10.0},
                "lidar": {"channels": 12, "vertical_fov": [-5.0, 5.0],
                          "horizontal_fov": [0.0, 360.0],
                          "horizontal_resolution": 2.0,
                          "max_range": 20.0, "scan_rate": 1.0},
            },
        },
        "network": {
            "nodes": [{"id": "G0", "position": [0.0, 0.0, alt]},
                      {"id": "G1", "position": [length, 0.0, alt]}],
            "airports": [{"id": "P0", "position": [0.0, 0.0, 0.0],
                          "linked_node": "G0", "pads": 1},
                         {"id": "P1", "position": [length, 0.0, 0.0],
                          "linked_node": "G1", "pads": 1}],
            "airways": [{"id": "R0", "a": "G0", "b": "G1",
                         "corridor_radius": 15.0, "bidirectional": True,
                         "capacity": 4}],
        },
        "fleet": [{"id": "V1", "home": "P0"}],
        "demands": [{"id": "DV1", "origin": "P0", "destination": "P1",
                     "departure": 30}],
        "anomalies": [],
        "clock": {},
        "wind": [0.0, 0.0, 0.0],
    }


def check_city_shape(doc: dict) -> None:
    net = doc["network"]
    n_nodes, n_airways = len(net["nodes"]), len(net["airways"])
    n_airports, n_demands = len(net["airports"]), len(doc["demands"])
    if (n_nodes, n_airways, n_airports, n_demands) != (45, 67, 13, 100):
        raise SystemExit(f"city shape off: {n_nodes} nodes, {n_airways} "
                         f"airways, {n_airports} airports, {n_demands} demands")
    reach = hop_distances(net, net["nodes"][0]["id"])
    if len(reach) != n_nodes:
        raise SystemExit("city lattice is disconnected")


def main() -> int:
    out_dir = Path(__file__).resolve().parent.parent / "scenarios"
    out_dir.mkdir(exist_ok=True)
    docs = {
        "smallcity_100.json": build_city(seed=11),
        "smallcity_100_faults.json": build_city_faults(seed=11),
        "obstacle_run_vfh.json": build_obstacle_run(seed=7),
    }
    check_city_shape(docs["smallcity_100.json"])
    for name, doc in docs.items():
        violations = validate_scenario(doc)
        if violations:
            for v in violations:
                print(f"{name}: {v}", file=sys.stderr)
            return 2
        path = out_dir / name
        path.write_text(json.dumps(doc, indent=2) + "\n")
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
