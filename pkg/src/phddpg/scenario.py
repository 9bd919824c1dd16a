"""Scenario files (roadnet + flow) and the synthetic grid generator."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import (
    Approach, NetworkError, RoadNetwork, Turn, build_network, dumps_network, exit_leg, load_roadnet,
    validate_route,
)
from .sim import FlowEntry, flow_from_records, flow_to_records

logger = logging.getLogger(__name__)

TURN_SHARES = {Turn.THROUGH: 0.6, Turn.LEFT: 0.2, Turn.RIGHT: 0.2}
_LANE_OF_TURN = {Turn.LEFT: 0, Turn.THROUGH: 1, Turn.RIGHT: 2}
_OFFSET = {Approach.N: (0, 1), Approach.E: (1, 0), Approach.S: (0, -1), Approach.W: (-1, 0)}


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    network: RoadNetwork
    flow: list[FlowEntry]
    name: str = "scenario"
    generator: dict | None = field(default=None)

    def with_seed(self, seed: int) -> "Scenario":
        """Same network with the demand resampled under ``seed`` (generated scenarios only)."""
        if self.generator is None:
            return self
        args = dict(self.generator)
        args["seed"] = seed
        return generate_grid(**args)

    def roadnet_json(self) -> str:
        return dumps_network(self.network)

    def flow_json(self) -> str:
        return json.dumps(flow_to_records(self.flow)) + "\n"

    def save(self, directory: str | Path) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        roadnet, flow = d / "roadnet.json", d / "flow.json"
        roadnet.write_text(self.roadnet_json())
        flow.write_text(self.flow_json())
        if self.generator is not None:
            (d / "generator.json").write_text(json.dumps(self.generator, sort_keys=True) + "\n")
        return roadnet, flow


def _read_json(path: str | Path, what: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"{what}: cannot read {path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{what} {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def load_scenario(roadnet_path: str | Path, flow_path: str | Path) -> Scenario:
    """Load and validate a roadnet/flow pair (native or CityFlow-style)."""
    raw_net = _read_json(roadnet_path, "roadnet")
    try:
        network = load_roadnet(raw_net)
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"roadnet {roadnet_path}: missing or bad field {exc}") from None
    except NetworkError as exc:
        raise ScenarioError(f"roadnet {roadnet_path}: {exc}") from None
    raw_flow = _read_json(flow_path, "flow")
    if not isinstance(raw_flow, list):
        raise ScenarioError(f"flow {flow_path}: expected a JSON list")
    if raw_flow and isinstance(raw_flow[0], dict) and "startTime" in raw_flow[0]:
        flow = cityflow_flow(network, raw_flow)
    else:
        try:
            flow = flow_from_records(raw_flow)
        except ValueError as exc:
            raise ScenarioError(f"flow {flow_path}: {exc}") from None
    for n, f in enumerate(flow):
        try:
            validate_route(network, f.route)
        except NetworkError as exc:
            raise ScenarioError(f"flow {flow_path}: vehicle {n}: {exc}") from None
    generator = None
    gen_path = Path(roadnet_path).with_name("generator.json")
    if gen_path.exists():
        generator = json.loads(gen_path.read_text())
    return Scenario(network, flow, Path(roadnet_path).parent.name or "scenario", generator)


def cityflow_flow(network: RoadNetwork, records: list) -> list[FlowEntry]:
    """Expand CityFlow vehicle flows (road routes) into lane routes."""
    flow = []
    for n, rec in enumerate(records):
        roads = [str(r) for r in rec.get("route", [])]
        lanes = _lane_route(network, roads)
        if lanes is None:
            logger.warning("CityFlow flow %d: route %s cannot be mapped onto lanes; skipped", n, roads)
            continue
        start, end = int(rec["startTime"]), int(rec.get("endTime", rec["startTime"]))
        interval = max(1, int(round(float(rec.get("interval", 1)))))
        t = start
        while True:
            flow.append(FlowEntry(t, lanes))
            t += interval
            if end < 0 or t > end:
                break
    return sorted(flow, key=lambda f: f.t)


def _lane_route(network: RoadNetwork, roads: list[str]) -> tuple[str, ...] | None:
    if not roads or any(r not in network.roads for r in roads):
        return None
    chosen = [network.roads[roads[-1]][0]]
    for road in reversed(roads[:-1]):
        target = chosen[0]
        hit = [l for l in network.roads[road] if (l, target) in network.links]
        if not hit:
            # let the downstream lane float to any linked lane
            pairs = [(l, t) for l in network.roads[road] for t in network.roads[roads[roads.index(road) + 1]]
                     if (l, t) in network.links]
            if not pairs or len(chosen) > 1:
                return None
            chosen[0] = pairs[0][1]
            hit = [pairs[0][0]]
        chosen.insert(0, hit[0])
    return tuple(chosen)


def _grid_network_spec(rows: int, cols: int, link_length: float) -> tuple[dict, dict]:
    """Native roadnet for a rows x cols grid; returns (spec, boundary entry roads by approach)."""
    nodes: dict[tuple[int, int], str] = {}
    coords: dict[str, tuple[float, float]] = {}
    for r in range(rows):
        for c in range(cols):
            nid = f"i{r}_{c}"
            nodes[(r, c)] = nid
            coords[nid] = (c * link_length, -r * link_length)

    def neighbor(r: int, c: int, leg: Approach) -> str:
        dc, dr = _OFFSET[leg][0], -_OFFSET[leg][1]
        rr, cc = r + dr, c + dc
        if (rr, cc) in nodes:
            return nodes[(rr, cc)]
        bid = f"b{r}_{c}_{leg.name}"
        x, y = coords[nodes[(r, c)]]
        coords[bid] = (x + _OFFSET[leg][0] * link_length, y + _OFFSET[leg][1] * link_length)
        return bid

    roads: dict[tuple[str, str], str] = {}
    legs: dict[str, dict[Approach, str]] = {}
    for (r, c), nid in nodes.items():
        legs[nid] = {}
        for leg in Approach:
            other = neighbor(r, c, leg)
            legs[nid][leg] = other
            for a, b in ((other, nid), (nid, other)):
                roads.setdefault((a, b), f"r_{a}_{b}")
    movements = []
    for (r, c), nid in nodes.items():
        for ap in Approach:
            in_road = roads[(legs[nid][ap], nid)]
            for turn, lane_idx in _LANE_OF_TURN.items():
                out_road = roads[(nid, legs[nid][exit_leg(ap, turn)])]
                for j in range(3):
                    fl, tl = f"{in_road}_{lane_idx}", f"{out_road}_{j}"
                    movements.append({"id": f"{fl}>{tl}", "from_lane": fl, "to_lane": tl, "turn": turn.value})
    inters = []
    for nid, (x, y) in coords.items():
        item = {"id": nid, "x": x, "y": y}
        if nid.startswith("b"):
            item["virtual"] = True
        inters.append(item)
    road_list = [
        {"id": rid, "from": a, "to": b, "lanes": [{"length": float(link_length)}] * 3}
        for (a, b), rid in roads.items()
    ]
    entries = {}
    for (a, b), rid in roads.items():
        if a.startswith("b"):
            entries[rid] = Approach[a.rsplit("_", 1)[1]]
    spec = {"intersections": inters, "roads": road_list, "movements": movements}
    return spec, entries


def _axis_route(network: RoadNetwork, entry_road: str, first_turn: Turn) -> tuple[str, ...]:
    """Turn once at the first junction, then go straight until leaving the grid."""
    out_road = {}
    for m in network.movements.values():
        out_road.setdefault(m.from_lane, network.lanes[m.to_lane].road)
    route = [f"{entry_road}_{_LANE_OF_TURN[first_turn]}"]
    while network.lanes[route[-1]].intersection_end is not None:
        # middle lane: the through lane at the next junction, or the middle lane of an exit road
        route.append(f"{out_road[route[-1]]}_1")
    return tuple(route)


def generate_grid(
    rows: int = 1, cols: int = 1, link_length: float = 300.0, demand: float = 600.0,
    seed: int = 0, duration: int = 3600, ns_share: float = 0.5, phase_scheme: str = "paired",
) -> Scenario:
    """Grid network with Poisson arrivals on every boundary entry road.

    ``demand`` is the total vehicles/hour over all origins; ``ns_share`` of it enters
    on north/south approaches. Each vehicle turns left/through/right (20/60/20) at
    its first junction and then continues straight.
    """
    if rows < 1 or cols < 1:
        raise ScenarioError("grid needs at least one row and one column")
    spec, entries = _grid_network_spec(rows, cols, link_length)
    spec["phase_scheme"] = phase_scheme
    network = build_network(spec)
    rng = np.random.default_rng(seed)
    ns = [r for r, ap in sorted(entries.items()) if ap in (Approach.N, Approach.S)]
    ew = [r for r, ap in sorted(entries.items()) if ap in (Approach.E, Approach.W)]
    rates = {r: demand * ns_share / len(ns) for r in ns}
    rates.update({r: demand * (1 - ns_share) / len(ew) for r in ew})
    turns = list(TURN_SHARES)
    probs = np.array([TURN_SHARES[t] for t in turns])
    routes_cache: dict[tuple[str, Turn], tuple[str, ...]] = {}
    flow: list[FlowEntry] = []
    for road in sorted(entries):
        lam = rates[road] / 3600.0
        if lam <= 0:
            continue
        t = rng.exponential(1.0 / lam)
        while t < duration:
            turn = turns[int(rng.choice(len(turns), p=probs))]
            key = (road, turn)
            if key not in routes_cache:
                routes_cache[key] = _axis_route(network, road, turn)
            flow.append(FlowEntry(int(round(t)), routes_cache[key]))
            t += rng.exponential(1.0 / lam)
    flow = [f for f in flow if f.t < duration]
    flow.sort(key=lambda f: f.t)
    args = dict(rows=rows, cols=cols, link_length=link_length, demand=demand, seed=seed,
                duration=duration, ns_share=ns_share, phase_scheme=phase_scheme)
    return Scenario(network, flow, f"grid{rows}x{cols}", args)
