"""Airway corridor network: airports, nodes, airways, validation and routing."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .world import LocalPoint, ValidationError


class LookupError_(KeyError):
    """Unknown entity id referenced in a query."""


@dataclass(frozen=True)
class AirwayNode:
    id: str
    position: LocalPoint


@dataclass(frozen=True)
class Airport:
    id: str
    ground_position: LocalPoint
    linked_node: str
    pads: int = 1

    def __post_init__(self):
        if self.pads < 1:
            raise ValidationError(f"airport {self.id}: pads must be >= 1")


@dataclass(frozen=True)
class Airway:
    """Straight corridor between two nodes. ``bidirectional=False`` means
    traffic flows only from endpoint a to endpoint b."""

    id: str
    a: str
    b: str
    corridor_radius: float = 10.0
    bidirectional: bool = True
    capacity: int = 4

    def __post_init__(self):
        if self.a == self.b:
            raise ValidationError(f"airway {self.id}: endpoints must differ")
        if self.corridor_radius <= 0:
            raise ValidationError(f"airway {self.id}: corridor radius must be positive")
        if self.capacity < 1:
            raise ValidationError(f"airway {self.id}: capacity must be >= 1")


@dataclass(frozen=True)
class Violation:
    rule: str
    entities: tuple[str, ...]
    detail: str

    def __str__(self):
        return f"[{self.rule}] {','.join(self.entities)}: {self.detail}"


class AirwayNetwork:
    """Immutable-after-load corridor graph."""

    def __init__(self, nodes: list[AirwayNode], airports: list[Airport], airways: list[Airway]):
        self.nodes = {n.id: n for n in nodes}
        if len(self.nodes) != len(nodes):
            raise ValidationError("duplicate node ids")
        self.airports = {a.id: a for a in airports}
        if len(self.airports) != len(airports):
            raise ValidationError("duplicate airport ids")
        self.airways = {w.id: w for w in airways}
        if len(self.airways) != len(airways):
            raise ValidationError("duplicate airway ids")
        self._adjacency: dict[str, list[tuple[str, str, float]]] = {n: [] for n in self.nodes}
        for w in airways:
            if w.a in self.nodes and w.b in self.nodes:
                length = self.airway_length(w.id)
                self._adjacency[w.a].append((w.b, w.id, length))
                if w.bidirectional:
                    self._adjacency[w.b].append((w.a, w.id, length))
        for lst in self._adjacency.values():
            lst.sort()

    def airway_length(self, airway_id: str) -> float:
        w = self.airways[airway_id]
        return self.nodes[w.a].position.distance_to(self.nodes[w.b].position)

    def airway_between(self, u: str, v: str) -> Airway | None:
        """The airway joining u and v in the permitted direction, if any."""
        for nbr, wid, _ in self._adjacency.get(u, []):
            if nbr == v:
                return self.airways[wid]
        return None

    def segment(self, airway_id: str) -> tuple[np.ndarray, np.ndarray]:
        w = self.airways[airway_id]
        return self.nodes[w.a].position.as_array(), self.nodes[w.b].position.as_array()


def _segment_pair_distance(p1, p2, q1, q2) -> float:
    """Minimum distance between two 3D segments (sampled-free closed form)."""
    d1 = p2 - p1
    d2 = q2 - q1
    r = p1 - q1
    a = float(np.dot(d1, d1))
    e = float(np.dot(d2, d2))
    f = float(np.dot(d2, r))
    if a == 0.0 and e == 0.0:
        return float(np.linalg.norm(r))
    if a == 0.0:
        s, t = 0.0, min(1.0, max(0.0, f / e))
    else:
        c = float(np.dot(d1, r))
        if e == 0.0:
            t, s = 0.0, min(1.0, max(0.0, -c / a))
        else:
            b = float(np.dot(d1, d2))
            denom = a * e - b * b
            s = min(1.0, max(0.0, (b * f - c * e) / denom)) if denom != 0.0 else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, min(1.0, max(0.0, -c / a))
            elif t > 1.0:
                t, s = 1.0, min(1.0, max(0.0, (b - c) / a))
    return float(np.linalg.norm(p1 + s * d1 - (q1 + t * d2)))


def validate_network(net: AirwayNetwork) -> list[Violation]:
    """Check every structural invariant; violations are values, not errors."""
    out: list[Violation] = []
    for apt in net.airports.values():
        if apt.linked_node not in net.nodes:
            out.append(Violation("airport-node-missing", (apt.id,),
                                 f"linked node {apt.linked_node} does not exist"))
    seen_pairs: dict[tuple[str, str], str] = {}
    for w in net.airways.values():
        if w.a not in net.nodes or w.b not in net.nodes:
            out.append(Violation("airway-endpoint-missing", (w.id,),
                                 f"endpoint {w.a if w.a not in net.nodes else w.b} does not exist"))
            continue
        pair = tuple(sorted((w.a, w.b)))
        if pair in seen_pairs:
            out.append(Violation("duplicate-airway", (seen_pairs[pair], w.id),
                                 f"both join nodes {pair[0]} and {pair[1]}"))
        else:
            seen_pairs[pair] = w.id
    # connectivity over airport-linked nodes (undirected view)
    linked = sorted({a.linked_node for a in net.airports.values() if a.linked_node in net.nodes})
    if len(linked) > 1:
        undirected: dict[str, set[str]] = {n: set() for n in net.nodes}
        for w in net.airways.values():
            if w.a in net.nodes and w.b in net.nodes:
                undirected[w.a].add(w.b)
                undirected[w.b].add(w.a)
        seen = {linked[0]}
        stack = [linked[0]]
        while stack:
            u = stack.pop()
            for v in undirected[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        for n in linked[1:]:
            if n not in seen:
                out.append(Violation("disconnected-airport-node", (n,),
                                     "not reachable from other airport-linked nodes"))
    # corridor interference: non-adjacent airways must keep centerline
    # separation of at least the sum of their corridor radii
    ids = sorted(net.airways)
    for i, wi in enumerate(ids):
        a = net.airways[wi]
        if a.a not in net.nodes or a.b not in net.nodes:
            continue
        p1, p2 = net.segment(wi)
        for wj in ids[i + 1:]:
            b = net.airways[wj]
            if b.a not in net.nodes or b.b not in net.nodes:
                continue
            if {a.a, a.b} & {b.a, b.b}:
                continue  # adjacent airways may meet at the shared node
            q1, q2 = net.segment(wj)
            dist = _segment_pair_distance(p1, p2, q1, q2)
            min_sep = a.corridor_radius + b.corridor_radius
            if dist < min_sep - 1e-9:
                out.append(Violation("corridor-interference", (wi, wj),
                                     f"centerline distance {dist:.2f} m < {min_sep:.2f} m"))
    return out


NO_ROUTE = None


@dataclass(frozen=True)
class Route:
    """A node walk plus the airway taken on each hop; length in metres."""

    nodes: list[str]
    airways: list[str]
    length: float

    def __post_init__(self):
        if len(self.airways) != max(0, len(self.nodes) - 1):
            raise ValidationError("route airway count must be node count - 1")


def route_from_nodes(net: AirwayNetwork, nodes: list[str]) -> Route:
    """Build a Route along an explicit node walk (hops must exist)."""
    airways, length = [], 0.0
    for u, v in zip(nodes, nodes[1:]):
        w = net.airway_between(u, v)
        if w is None:
            raise LookupError_(f"no airway from {u} to {v}")
        airways.append(w.id)
        length += net.airway_length(w.id)
    return Route(nodes, airways, length)


def shortest_route(net: AirwayNetwork, from_airport: str, to_airport: str,
                   closed: frozenset[str] | set[str] = frozenset()) -> Route | None:
    """Minimum-length route between two airports' linked nodes.

    Ties are broken toward the lexicographically smallest node-id sequence,
    so identical queries always return identical routes. Returns None when
    closures disconnect the pair.
    """
    for apt in (from_airport, to_airport):
        if apt not in net.airports:
            raise LookupError_(f"unknown airport {apt}")
    src = net.airports[from_airport].linked_node
    dst = net.airports[to_airport].linked_node
    return shortest_node_route(net, src, dst, closed)


def shortest_node_route(net: AirwayNetwork, src: str, dst: str,
                        closed: frozenset[str] | set[str] = frozenset()) -> Route | None:
    """shortest_route between two network nodes; used for mid-flight re-plans."""
    for nid in (src, dst):
        if nid not in net.nodes:
            raise LookupError_(f"unknown node {nid}")
    if src == dst:
        return Route([src], [], 0.0)

    dist_from = _dijkstra(net, src, closed, reverse=False)
    if dst not in dist_from or math.isinf(dist_from[dst]):
        return NO_ROUTE
    dist_to = _dijkstra(net, dst, closed, reverse=True)
    total = dist_from[dst]

    # Greedy forward walk: at each node pick the smallest-id neighbor that
    # keeps the combined distance optimal. This yields the lexicographically
    # smallest optimal node sequence.
    eps = 1e-9 * max(1.0, total)
    path, hops = [src], []
    u = src
    while u != dst:
        advanced = False
        for v, wid, w in net._adjacency[u]:  # sorted by (node id, airway id)
            if wid in closed:
                continue
            if abs(dist_from[u] + w + dist_to.get(v, math.inf) - total) <= eps:
                path.append(v)
                hops.append(wid)
                u = v
                advanced = True
                break
        if not advanced:
            return NO_ROUTE  # numeric degeneracy; should not happen
    return Route(path, hops, total)


def _dijkstra(net: AirwayNetwork, source: str, closed, reverse: bool) -> dict[str, float]:
    dist = {n: math.inf for n in net.nodes}
    dist[source] = 0.0
    heap = [(0.0, source)]
    if reverse:
        incoming: dict[str, list[tuple[str, str, float]]] = {n: [] for n in net.nodes}
        for u, edges in net._adjacency.items():
            for v, wid, w in edges:
                incoming[v].append((u, wid, w))
        adjacency = incoming
    else:
        adjacency = net._adjacency
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, wid, w in adjacency[u]:
            if wid in closed:
                continue
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def generate_grid_network(rows: int, cols: int, spacing: float, altitude: float,
                          airport_every: int, corridor_radius: float = 10.0,
                          capacity: int = 4) -> AirwayNetwork:
    """Rectangular lattice of nodes with bidirectional row/column airways and
    an airport under every ``airport_every``-th node (row-major order)."""
    if rows < 2 or cols < 2:
        raise ValidationError("grid needs rows >= 2 and cols >= 2")
    if spacing <= 0:
        raise ValidationError("spacing must be positive")
    if airport_every < 1:
        raise ValidationError("airport_every must be >= 1")
    if spacing < 2 * corridor_radius:
        raise ValidationError("spacing too small for the corridor radius")
    width = len(str(rows * cols - 1))
    nodes, airports, airways = [], [], []

    def nid(r, c):
        return f"N{r * cols + c:0{width}d}"

    for r in range(rows):
        for c in range(cols):
            nodes.append(AirwayNode(nid(r, c), LocalPoint(c * spacing, r * spacing, altitude)))
    for idx in range(0, rows * cols, airport_every):
        r, c = divmod(idx, cols)
        airports.append(Airport(f"A{idx:0{width}d}", LocalPoint(c * spacing, r * spacing, 0.0),
                                nid(r, c)))
    k = 0
    ewidth = len(str(rows * (cols - 1) + cols * (rows - 1)))
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                airways.append(Airway(f"W{k:0{ewidth}d}", nid(r, c), nid(r, c + 1),
                                      corridor_radius, True, capacity))
                k += 1
            if r + 1 < rows:
                airways.append(Airway(f"W{k:0{ewidth}d}", nid(r, c), nid(r + 1, c),
                                      corridor_radius, True, capacity))
                k += 1
    return AirwayNetwork(nodes, airports, airways)


def nearest_airway_point(net: AirwayNetwork, p: LocalPoint) -> tuple[str, LocalPoint, float]:
    """Globally nearest centerline point over all airways; ties go to the
    smallest airway id."""
    if not net.airways:
        raise LookupError_("network has no airways")
    pt = p.as_array()
    best: tuple[float, str, np.ndarray] | None = None
    for wid in sorted(net.airways):
        a, b = net.segment(wid)
        d = b - a
        dd = float(np.dot(d, d))
        t = 0.0 if dd == 0.0 else min(1.0, max(0.0, float(np.dot(pt - a, d)) / dd))
        q = a + t * d
        dist = float(np.linalg.norm(q - pt))
        if best is None or dist < best[0] - 1e-12:
            best = (dist, wid, q)
    dist, wid, q = best
    return wid, LocalPoint.from_array(q), dist
