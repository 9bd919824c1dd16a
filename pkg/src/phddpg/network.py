"""Static road network: lanes, movements, phases and their validation.

Networks are built from a plain roadnet mapping (the native JSON format)::

    {
      "intersections": [{"id": "i0", "x": 0, "y": 0, "phases": [[movement ids], ...]}],
      "roads": [{"id": "r0", "from": "n0", "to": "i0", "lanes": [{"length": 300}, ...]}],
      "movements": [{"id": "m0", "from_lane": "r0_0", "to_lane": "r5_1", "turn": "left"}]
    }

Intersections with ``"virtual": true`` (or without any movements) are
unsignalised boundary nodes. ``phases`` may be omitted on standard 4x3
intersections, in which case the default phase set is generated.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

VEHICLE_SPACING = 7.5
SEGMENT_COUNT = 4
SEGMENT_LENGTH = 100.0


class NetworkError(ValueError):
    """Raised for malformed or inconsistent network specifications."""


class RouteError(NetworkError):
    def __init__(self, index: int, message: str):
        super().__init__(f"broken route link at position {index}: {message}")
        self.index = index


class Turn(str, Enum):
    LEFT = "left"
    THROUGH = "through"
    RIGHT = "right"


TURN_ALIASES = {
    "left": Turn.LEFT, "turn_left": Turn.LEFT, "l": Turn.LEFT,
    "through": Turn.THROUGH, "go_straight": Turn.THROUGH, "straight": Turn.THROUGH, "t": Turn.THROUGH,
    "right": Turn.RIGHT, "turn_right": Turn.RIGHT, "r": Turn.RIGHT,
}
TURN_ORDER = (Turn.LEFT, Turn.THROUGH, Turn.RIGHT)


class Approach(IntEnum):
    """Leg of an intersection, clockwise from north. Vehicles on approach N come from the north."""

    N = 0
    E = 1
    S = 2
    W = 3

    @property
    def opposite(self) -> "Approach":
        return Approach((self + 2) % 4)


# leg angle in degrees, used for path-crossing tests
_LEG_ANGLE = {Approach.N: 90.0, Approach.E: 0.0, Approach.S: 270.0, Approach.W: 180.0}


def exit_leg(approach: Approach, turn: Turn) -> Approach:
    if turn is Turn.THROUGH:
        return approach.opposite
    if turn is Turn.LEFT:
        return Approach((approach + 1) % 4)
    return Approach((approach - 1) % 4)


def direction_of(dx: float, dy: float) -> Approach:
    """Cardinal direction of the vector (dx, dy)."""
    if abs(dx) >= abs(dy):
        return Approach.E if dx > 0 else Approach.W
    return Approach.N if dy > 0 else Approach.S


def _interleaved(a: tuple[float, float], b: tuple[float, float]) -> bool:
    lo, hi = sorted(a)
    inside = [lo < p < hi for p in b]
    return inside[0] != inside[1]


def movements_conflict(a: tuple[Approach, Turn], b: tuple[Approach, Turn]) -> bool:
    """Standard 4-leg conflict test: paths merge into one exit or cross inside the box.

    Each path is a chord between its inbound point (leg angle + 10 deg, right-hand
    traffic) and its outbound point (leg angle - 10 deg). Diverging paths from the
    same approach never conflict.
    """
    (ap_a, turn_a), (ap_b, turn_b) = a, b
    if ap_a == ap_b:
        return False
    out_a, out_b = exit_leg(ap_a, turn_a), exit_leg(ap_b, turn_b)
    if out_a == out_b:
        return True
    chord_a = (_LEG_ANGLE[ap_a] + 10.0, (_LEG_ANGLE[out_a] - 10.0) % 360.0)
    chord_b = (_LEG_ANGLE[ap_b] + 10.0, (_LEG_ANGLE[out_b] - 10.0) % 360.0)
    return _interleaved(chord_a, chord_b)


@dataclass(frozen=True)
class Lane:
    id: str
    road: str
    index: int
    length: float
    from_node: str
    to_node: str
    turn: Turn | None = None
    intersection_end: str | None = None  # signalised intersection this lane feeds
    segment_count: int = SEGMENT_COUNT
    segment_length: float = SEGMENT_LENGTH

    @property
    def capacity(self) -> int:
        return int(math.floor(self.length / VEHICLE_SPACING))


@dataclass(frozen=True)
class Movement:
    id: str
    from_lane: str
    to_lane: str
    turn: Turn
    intersection: str
    approach: Approach


@dataclass(frozen=True)
class Phase:
    id: int
    movements: tuple[str, ...]


@dataclass(frozen=True)
class PhaseSet:
    phases: tuple[Phase, ...]
    cycle_order: tuple[int, ...]

    @property
    def K(self) -> int:
        return len(self.phases)

    def successor(self, k: int) -> int:
        pos = self.cycle_order.index(k)
        return self.cycle_order[(pos + 1) % len(self.cycle_order)]


@dataclass(frozen=True)
class Neighbor:
    intersection: str
    direction: Approach
    distance: float


@dataclass(frozen=True)
class Intersection:
    id: str
    x: float
    y: float
    virtual: bool = False
    entry_lanes: tuple[str, ...] = ()
    exit_lanes: tuple[str, ...] = ()
    approach_of: Mapping[str, Approach] = field(default_factory=dict)
    # (approach, turn) -> movement ids, the signal groups of the junction
    groups: Mapping[tuple[Approach, Turn], tuple[str, ...]] = field(default_factory=dict)
    phase_set: PhaseSet | None = None

    @property
    def is_standard(self) -> bool:
        if len(self.entry_lanes) != 12:
            return False
        return all((ap, t) in self.groups for ap in Approach for t in TURN_ORDER)


@dataclass(frozen=True)
class RoadNetwork:
    intersections: Mapping[str, Intersection]
    lanes: Mapping[str, Lane]
    roads: Mapping[str, tuple[str, ...]]
    movements: Mapping[str, Movement]
    neighbor_map: Mapping[str, tuple[Neighbor, ...]]
    # (from_lane, to_lane) -> movement id
    links: Mapping[tuple[str, str], str]
    phase_scheme: str = "paired"

    @property
    def signalized(self) -> list[str]:
        return [i for i, node in self.intersections.items() if not node.virtual]

    def movement_between(self, from_lane: str, to_lane: str) -> Movement | None:
        mid = self.links.get((from_lane, to_lane))
        return None if mid is None else self.movements[mid]

    def phase_set(self, intersection: str) -> PhaseSet:
        ps = self.intersections[intersection].phase_set
        if ps is None:
            raise NetworkError(f"intersection {intersection!r} is not signalised")
        return ps


# ---------------------------------------------------------------- phase sets

PHASE_SCHEMES = ("paired", "split", "eight")


def _scheme_groups(scheme: str) -> list[list[tuple[Approach, Turn]]]:
    A, T = Approach, Turn
    if scheme == "paired":
        return [
            [(A.N, T.THROUGH), (A.S, T.THROUGH)],
            [(A.N, T.LEFT), (A.S, T.LEFT)],
            [(A.E, T.THROUGH), (A.W, T.THROUGH)],
            [(A.E, T.LEFT), (A.W, T.LEFT)],
        ]
    if scheme == "split":
        return [[(ap, T.THROUGH), (ap, T.LEFT)] for ap in (A.N, A.S, A.E, A.W)]
    if scheme == "eight":
        return [[(ap, t)] for ap in (A.N, A.S, A.E, A.W) for t in (T.THROUGH, T.LEFT)]
    raise NetworkError(f"unknown phase scheme {scheme!r}; expected one of {PHASE_SCHEMES}")


def default_phase_set(intersection: Intersection, scheme: str = "paired") -> PhaseSet:
    """Phase set for a standard 4-approach x 3-lane intersection.

    ``paired`` gives NS-Through, NS-Left, EW-Through, EW-Left. ``split`` serves one
    approach at a time and ``eight`` gives each through/left movement its own phase.
    """
    if not intersection.is_standard:
        raise NetworkError(
            f"intersection {intersection.id!r} has a nonstandard layout; give its phases explicitly"
        )
    phases = []
    for k, groups in enumerate(_scheme_groups(scheme)):
        mids: list[str] = []
        for g in groups:
            mids.extend(intersection.groups[g])
        phases.append(Phase(k, tuple(mids)))
    return PhaseSet(tuple(phases), tuple(range(len(phases))))


def phase_groups(intersection: Intersection, movements: Mapping[str, Movement], phase: Phase) -> set[tuple[Approach, Turn]]:
    return {(movements[m].approach, movements[m].turn) for m in phase.movements}


def check_phase(movements: Mapping[str, Movement], phase_movements: Iterable[str]) -> None:
    """Raise NetworkError if any two movements of one phase conflict or a right turn is included."""
    mids = sorted(set(phase_movements))
    for m in mids:
        if movements[m].turn is Turn.RIGHT:
            raise NetworkError(f"right-turn movement {m!r} cannot belong to a phase")
    for i, a in enumerate(mids):
        ga = (movements[a].approach, movements[a].turn)
        for b in mids[i + 1:]:
            gb = (movements[b].approach, movements[b].turn)
            if movements_conflict(ga, gb):
                raise NetworkError(f"conflicting movements {a!r} and {b!r} in one phase")


# ---------------------------------------------------------------- building

def _turn(value: str) -> Turn:
    try:
        return TURN_ALIASES[str(value).lower()]
    except KeyError:
        raise NetworkError(f"movements[].turn: unknown turn {value!r}") from None


def build_network(spec: Mapping) -> RoadNetwork:
    """Validate a roadnet mapping and build an immutable RoadNetwork."""
    for key in ("intersections", "roads", "movements"):
        if key not in spec or not isinstance(spec[key], list):
            raise NetworkError(f"roadnet: missing or non-list field {key!r}")
    scheme = spec.get("phase_scheme", "paired")

    nodes: dict[str, dict] = {}
    for n, item in enumerate(spec["intersections"]):
        try:
            nid = str(item["id"])
            nodes[nid] = {"x": float(item["x"]), "y": float(item["y"]), "raw": item}
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkError(f"intersections[{n}]: bad or missing field ({exc})") from None

    lanes: dict[str, Lane] = {}
    roads: dict[str, tuple[str, ...]] = {}
    road_ends: dict[str, tuple[str, str]] = {}
    for n, road in enumerate(spec["roads"]):
        try:
            rid, frm, to = str(road["id"]), str(road["from"]), str(road["to"])
            lane_specs = road["lanes"]
        except (KeyError, TypeError) as exc:
            raise NetworkError(f"roads[{n}]: missing field {exc}") from None
        for end in (frm, to):
            if end not in nodes:
                raise NetworkError(f"roads[{n}]: dangling node reference {end!r}")
        ids = []
        for li, ls in enumerate(lane_specs):
            length = float(ls["length"])
            if not length > 0:
                raise NetworkError(f"roads[{n}].lanes[{li}].length must be > 0")
            lid = f"{rid}_{li}"
            lanes[lid] = Lane(lid, rid, li, length, frm, to)
            ids.append(lid)
        roads[rid] = tuple(ids)
        road_ends[rid] = (frm, to)

    movements: dict[str, Movement] = {}
    links: dict[tuple[str, str], str] = {}
    lane_turns: dict[str, set[Turn]] = {}
    for n, mv in enumerate(spec["movements"]):
        try:
            fl, tl = str(mv["from_lane"]), str(mv["to_lane"])
            turn = _turn(mv["turn"])
        except KeyError as exc:
            raise NetworkError(f"movements[{n}]: missing field {exc}") from None
        for lid in (fl, tl):
            if lid not in lanes:
                raise NetworkError(f"movements[{n}]: dangling lane reference {lid!r}")
        node = lanes[fl].to_node
        if lanes[tl].from_node != node:
            raise NetworkError(f"movements[{n}]: lanes {fl!r} and {tl!r} do not meet at a node")
        nx, ny = nodes[node]["x"], nodes[node]["y"]
        up = nodes[lanes[fl].from_node]
        approach = direction_of(up["x"] - nx, up["y"] - ny)
        mid = str(mv.get("id", f"m{n}"))
        if mid in movements:
            raise NetworkError(f"movements[{n}]: duplicate movement id {mid!r}")
        movements[mid] = Movement(mid, fl, tl, turn, node, approach)
        links[(fl, tl)] = mid
        lane_turns.setdefault(fl, set()).add(turn)

    # lane turn designation and signalised end
    by_node_moves: dict[str, list[str]] = {}
    for mid, m in movements.items():
        by_node_moves.setdefault(m.intersection, []).append(mid)
    signalised = {
        nid for nid, nd in nodes.items()
        if not nd["raw"].get("virtual", False) and by_node_moves.get(nid)
    }
    for lid, lane in list(lanes.items()):
        turns = lane_turns.get(lid, set())
        turn = next(iter(turns)) if len(turns) == 1 else None
        end = lane.to_node if lane.to_node in signalised else None
        lanes[lid] = Lane(lane.id, lane.road, lane.index, lane.length, lane.from_node, lane.to_node, turn, end)

    intersections: dict[str, Intersection] = {}
    turn_rank = {t: i for i, t in enumerate(TURN_ORDER)}
    for nid, nd in nodes.items():
        raw = nd["raw"]
        if nid not in signalised:
            intersections[nid] = Intersection(nid, nd["x"], nd["y"], virtual=True)
            continue
        mids = by_node_moves[nid]
        groups: dict[tuple[Approach, Turn], list[str]] = {}
        approach_of: dict[str, Approach] = {}
        for mid in sorted(mids):
            m = movements[mid]
            groups.setdefault((m.approach, m.turn), []).append(mid)
            approach_of[m.from_lane] = m.approach
        entry = sorted(
            approach_of,
            key=lambda l: (approach_of[l], turn_rank.get(lanes[l].turn, 3), l),
        )
        exits = sorted(l for l, ln in lanes.items() if ln.from_node == nid)
        node = Intersection(
            nid, nd["x"], nd["y"], False, tuple(entry), tuple(exits), approach_of,
            {g: tuple(v) for g, v in groups.items()},
        )
        raw_phases = raw.get("phases")
        if raw_phases:
            phase_list = []
            for k, pm in enumerate(raw_phases):
                for m in pm:
                    if m not in movements:
                        raise NetworkError(f"intersection {nid!r} phase {k}: dangling movement {m!r}")
                    if movements[m].intersection != nid:
                        raise NetworkError(f"intersection {nid!r} phase {k}: movement {m!r} belongs elsewhere")
                phase_list.append(Phase(k, tuple(str(m) for m in pm)))
            order = tuple(int(c) for c in raw.get("cycle_order", range(len(phase_list))))
            phase_set = PhaseSet(tuple(phase_list), order)
        else:
            phase_set = default_phase_set(node, scheme)
        _validate_phase_set(node, movements, phase_set)
        intersections[nid] = Intersection(
            nid, nd["x"], nd["y"], False, node.entry_lanes, node.exit_lanes,
            node.approach_of, node.groups, phase_set,
        )

    neighbor_map: dict[str, tuple[Neighbor, ...]] = {}
    for nid in sorted(signalised):
        adj: dict[str, Neighbor] = {}
        for rid, (frm, to) in road_ends.items():
            other = to if frm == nid else frm if to == nid else None
            if other is None or other not in signalised or other == nid:
                continue
            dx = nodes[other]["x"] - nodes[nid]["x"]
            dy = nodes[other]["y"] - nodes[nid]["y"]
            adj[other] = Neighbor(other, direction_of(dx, dy), math.hypot(dx, dy))
        neighbor_map[nid] = tuple(sorted(adj.values(), key=lambda nb: (nb.direction, nb.intersection)))

    return RoadNetwork(
        intersections, lanes, roads, movements, neighbor_map, links, scheme,
    )


def _validate_phase_set(node: Intersection, movements: Mapping[str, Movement], ps: PhaseSet) -> None:
    if ps.K < 2:
        raise NetworkError(f"intersection {node.id!r}: phase set needs K >= 2, got {ps.K}")
    if sorted(ps.cycle_order) != list(range(ps.K)):
        raise NetworkError(f"intersection {node.id!r}: cycle_order must be a permutation of 0..{ps.K - 1}")
    for phase in ps.phases:
        try:
            check_phase(movements, phase.movements)
        except NetworkError as exc:
            raise NetworkError(f"intersection {node.id!r} phase {phase.id}: {exc}") from None
    served = {m for p in ps.phases for m in p.movements}
    for (ap, turn), mids in node.groups.items():
        if turn is Turn.RIGHT:
            continue
        missing = [m for m in mids if m not in served]
        if missing:
            raise NetworkError(f"intersection {node.id!r}: movements {missing} appear in no phase")


def validate_route(network: RoadNetwork, route: Sequence[str]) -> None:
    """Raise RouteError unless each consecutive lane pair is linked.

    Pairs are linked by a movement or by road continuation through an
    unsignalised node (no movements defined there).
    """
    if not route:
        raise RouteError(0, "empty route")
    for i, lid in enumerate(route):
        if lid not in network.lanes:
            raise RouteError(i, f"unknown lane {lid!r}")
    for i in range(1, len(route)):
        a, b = network.lanes[route[i - 1]], network.lanes[route[i]]
        if (a.id, b.id) in network.links:
            continue
        node = network.intersections[a.to_node]
        if node.virtual and b.from_node == a.to_node and b.road != a.road:
            continue
        raise RouteError(i, f"no link from {a.id!r} to {b.id!r}")


# ---------------------------------------------------------------- (de)serialisation

def network_to_spec(network: RoadNetwork) -> dict:
    """Native roadnet mapping with every phase written out explicitly."""
    inters = []
    for nid, node in network.intersections.items():
        item: dict = {"id": nid, "x": node.x, "y": node.y}
        if node.virtual:
            item["virtual"] = True
        else:
            ps = node.phase_set
            item["phases"] = [list(p.movements) for p in ps.phases]
            item["cycle_order"] = list(ps.cycle_order)
        inters.append(item)
    roads = []
    for rid, lane_ids in network.roads.items():
        first = network.lanes[lane_ids[0]]
        roads.append({
            "id": rid, "from": first.from_node, "to": first.to_node,
            "lanes": [{"length": network.lanes[l].length} for l in lane_ids],
        })
    moves = [
        {"id": m.id, "from_lane": m.from_lane, "to_lane": m.to_lane, "turn": m.turn.value}
        for m in network.movements.values()
    ]
    return {"phase_scheme": network.phase_scheme, "intersections": inters, "roads": roads, "movements": moves}


def dumps_network(network: RoadNetwork) -> str:
    return json.dumps(network_to_spec(network), indent=1) + "\n"


def load_roadnet(data: Mapping) -> RoadNetwork:
    """Build from either the native format or a reduced CityFlow roadnet."""
    if "movements" in data:
        return build_network(data)
    if "intersections" in data and "roads" in data:
        return build_network(cityflow_to_spec(data))
    raise NetworkError("roadnet: unrecognised format (need 'movements' or CityFlow 'roadLinks')")


def cityflow_to_spec(data: Mapping) -> dict:
    """Best-effort mapping of a CityFlow roadnet onto the native format."""
    inters, roads, moves = [], [], []
    for node in data["intersections"]:
        point = node.get("point", {})
        item = {"id": str(node["id"]), "x": float(point.get("x", 0.0)), "y": float(point.get("y", 0.0))}
        if node.get("virtual"):
            item["virtual"] = True
        inters.append(item)
    for road in data["roads"]:
        pts = road.get("points") or []
        if len(pts) >= 2:
            length = sum(
                math.hypot(b["x"] - a["x"], b["y"] - a["y"]) for a, b in zip(pts, pts[1:])
            )
        else:
            length = float(road.get("length", 300.0))
        roads.append({
            "id": str(road["id"]), "from": str(road["startIntersection"]), "to": str(road["endIntersection"]),
            "lanes": [{"length": round(length, 3)} for _ in road.get("lanes", [])],
        })
    phase_specs: dict[str, list[list[str]]] = {}
    for node in data["intersections"]:
        links = node.get("roadLinks") or []
        link_moves: list[list[str]] = []
        for li, link in enumerate(links):
            ids = []
            ltype = str(link.get("type", "go_straight"))
            if ltype not in TURN_ALIASES:
                logger.warning("intersection %s: unsupported roadLink type %r skipped", node["id"], ltype)
                link_moves.append(ids)
                continue
            for ll in link.get("laneLinks", []):
                mid = f"{node['id']}:{li}:{ll['startLaneIndex']}:{ll['endLaneIndex']}"
                moves.append({
                    "id": mid,
                    "from_lane": f"{link['startRoad']}_{ll['startLaneIndex']}",
                    "to_lane": f"{link['endRoad']}_{ll['endLaneIndex']}",
                    "turn": TURN_ALIASES[ltype].value,
                })
                ids.append(mid)
            link_moves.append(ids)
        light = node.get("trafficLight") or {}
        phases = []
        for ph in light.get("lightphases", []):
            mids = []
            for li in ph.get("availableRoadLinks", []):
                if li < len(links) and TURN_ALIASES.get(str(links[li].get("type"))) is not Turn.RIGHT:
                    mids.extend(link_moves[li])
            if mids and sorted(mids) not in [sorted(p) for p in phases]:
                phases.append(mids)
        if phases:
            phase_specs[str(node["id"])] = phases
    for item in inters:
        if item["id"] in phase_specs and len(phase_specs[item["id"]]) >= 2:
            item["phases"] = phase_specs[item["id"]]
    ignored = set(data) - {"intersections", "roads"}
    if ignored:
        logger.warning("CityFlow roadnet: ignored top-level fields %s", sorted(ignored))
    return {"intersections": inters, "roads": roads, "movements": moves}
