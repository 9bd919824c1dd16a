"""Deterministic 1-second point-queue microsimulation of signalised intersections.

Vehicles travel at free-flow speed until they reach the back of the queue or the
stopline; queues discharge one vehicle per saturation headway while the lane's
movement is green. Right turns are always permitted but yield to conflicting
through traffic discharging in the same second, and nothing discharges at an
intersection while it is in yellow or all-red.

State objects are mutated in place for speed; the functions still return the
state so calls read as transitions.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .network import RoadNetwork, Turn, VEHICLE_SPACING, movements_conflict, validate_route

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    yellow: int = 3
    red_clearance: int = 2
    free_flow_speed: float = 11.0
    saturation_headway: int = 2
    x_min: float = 10.0
    x_max: float = 40.0


class ControllerError(RuntimeError):
    """A controller returned an action the simulator cannot execute."""


class Mode(str, Enum):
    MOVING = "moving"
    QUEUED = "queued"
    ARRIVED = "arrived"


class Stage(str, Enum):
    GREEN = "green"
    YELLOW = "yellow"
    ALL_RED = "all_red"


@dataclass(slots=True)
class VehicleState:
    id: int
    route: tuple[str, ...]
    route_pos: int
    entry_time: int
    distance_to_stopline: float
    mode: Mode = Mode.MOVING
    arrival_time: int | None = None

    @property
    def lane(self) -> str:
        return self.route[self.route_pos]


@dataclass(frozen=True)
class IntersectionSignalState:
    active_phase: int = 0
    phase_elapsed: int = 0
    phase_duration: float = 0.0
    stage: Stage = Stage.GREEN
    stage_remaining: int = 0
    pending_phase: int | None = None
    pending_duration: float = 0.0
    prev_duration: float | None = None

    @property
    def at_decision_point(self) -> bool:
        return self.stage is Stage.GREEN and self.phase_elapsed >= self.phase_duration

    @property
    def green_active(self) -> bool:
        return self.stage is Stage.GREEN and self.phase_elapsed < self.phase_duration


@dataclass(frozen=True)
class FlowEntry:
    t: int
    route: tuple[str, ...]


FlowSpec = Sequence[FlowEntry]


def flow_from_records(records: Iterable[Mapping]) -> list[FlowEntry]:
    flow = []
    for n, rec in enumerate(records):
        try:
            flow.append(FlowEntry(int(rec["t"]), tuple(str(l) for l in rec["route"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"flow[{n}]: bad or missing field ({exc})") from None
    return sorted(flow, key=lambda f: f.t)


def flow_to_records(flow: FlowSpec) -> list[dict]:
    return [{"t": f.t, "route": list(f.route)} for f in flow]


@dataclass
class SimState:
    network: RoadNetwork
    config: SimConfig
    clock: int = 0
    vehicles: dict[int, VehicleState] = field(default_factory=dict)
    lanes: dict[str, list[VehicleState]] = field(default_factory=dict)
    last_discharge: dict[str, int] = field(default_factory=dict)
    signals: dict[str, IntersectionSignalState] = field(default_factory=dict)
    waiting: dict[str, deque] = field(default_factory=dict)  # entry lane -> deferred vehicles
    flow_cursor: int = 0
    scheduled: int = 0
    injected: int = 0
    arrived: int = 0
    rng_seed: int = 0
    discharges: list[tuple[str, str, str]] = field(default_factory=list)  # (intersection, lane, turn) this step
    records: list[tuple[int, int, int | None]] = field(default_factory=list)  # (vid, entry, arrival) all scheduled
    unsignalised: list[str] = field(default_factory=list)  # lanes ending at unsignalised nodes

    @property
    def in_network(self) -> int:
        return sum(len(v) for v in self.lanes.values())

    def lane_count(self, lane: str) -> int:
        return len(self.lanes[lane])


def initial_state(network: RoadNetwork, config: SimConfig = SimConfig(), seed: int = 0) -> SimState:
    state = SimState(network, config, rng_seed=seed)
    state.lanes = {lid: [] for lid in network.lanes}
    state.last_discharge = {lid: -10**9 for lid in network.lanes}
    state.signals = {i: IntersectionSignalState() for i in network.signalized}
    state.unsignalised = [l for l, lane in network.lanes.items() if lane.intersection_end is None]
    return state


def _place(state: SimState, veh: VehicleState, lane_id: str) -> None:
    """Put a vehicle at the upstream end of a lane, compacting moving vehicles ahead of it."""
    lane = state.network.lanes[lane_id]
    vehs = state.lanes[lane_id]
    veh.distance_to_stopline = lane.length
    veh.mode = Mode.MOVING
    limit = lane.length
    for other in reversed(vehs):
        limit -= VEHICLE_SPACING
        if other.distance_to_stopline <= limit:
            break
        other.distance_to_stopline = limit
    vehs.append(veh)


def _has_space(state: SimState, lane_id: str) -> bool:
    return len(state.lanes[lane_id]) < state.network.lanes[lane_id].capacity


def inject_vehicles(state: SimState, flow: FlowSpec) -> SimState:
    """Insert every vehicle scheduled at or before the clock, deferring those whose entry lane is full."""
    while state.flow_cursor < len(flow) and flow[state.flow_cursor].t <= state.clock:
        entry = flow[state.flow_cursor]
        vid = state.flow_cursor
        state.flow_cursor += 1
        state.scheduled += 1
        veh = VehicleState(vid, entry.route, 0, entry.t, 0.0)
        state.vehicles[vid] = veh
        state.records.append((vid, entry.t, None))
        state.waiting.setdefault(entry.route[0], deque()).append(veh)
    for lane_id, q in state.waiting.items():
        while q and _has_space(state, lane_id):
            _place(state, q.popleft(), lane_id)
            state.injected += 1
    return state


def apply_phase_command(
    signal: IntersectionSignalState, k: int, x_k: float, config: SimConfig = SimConfig()
) -> tuple[IntersectionSignalState, bool]:
    """Start the next green. Returns the new signal state and whether x_k was clamped.

    Re-selecting the active phase extends its green with no clearance; any other
    phase goes through yellow and all-red first.
    """
    if not signal.at_decision_point:
        raise ValueError("phase commands are only accepted when the active green has expired")
    x = float(min(max(x_k, config.x_min), config.x_max))
    clamped = x != float(x_k)
    if clamped:
        logger.warning("phase duration %.3f outside [%g, %g]; clamped to %g", x_k, config.x_min, config.x_max, x)
    if k == signal.active_phase:
        return dataclasses.replace(signal, phase_duration=signal.phase_duration + x, prev_duration=x), clamped
    if config.yellow > 0:
        stage, remaining = Stage.YELLOW, config.yellow
    elif config.red_clearance > 0:
        stage, remaining = Stage.ALL_RED, config.red_clearance
    else:
        return IntersectionSignalState(k, 0, x, Stage.GREEN, 0, None, 0.0, x), clamped
    return dataclasses.replace(
        signal, stage=stage, stage_remaining=remaining, pending_phase=k,
        pending_duration=x, prev_duration=x,
    ), clamped


def _advance_signal(sig: IntersectionSignalState, config: SimConfig) -> IntersectionSignalState:
    if sig.stage is Stage.GREEN:
        if sig.phase_elapsed < sig.phase_duration:
            return dataclasses.replace(sig, phase_elapsed=sig.phase_elapsed + 1)
        return sig
    remaining = sig.stage_remaining - 1
    if remaining > 0:
        return dataclasses.replace(sig, stage_remaining=remaining)
    if sig.stage is Stage.YELLOW and config.red_clearance > 0:
        return dataclasses.replace(sig, stage=Stage.ALL_RED, stage_remaining=config.red_clearance)
    return IntersectionSignalState(
        sig.pending_phase, 0, sig.pending_duration, Stage.GREEN, 0, None, 0.0, sig.prev_duration,
    )


def _advance_lane(state: SimState, lane_id: str, speed: float, now: int) -> None:
    vehs = state.lanes[lane_id]
    if not vehs:
        return
    leader_d = None
    leader_queued = False
    arrived = 0
    for i, v in enumerate(vehs):
        if v.mode is Mode.QUEUED:
            v.distance_to_stopline = VEHICLE_SPACING * i
            leader_d, leader_queued = v.distance_to_stopline, True
            continue
        floor = 0.0 if leader_d is None else leader_d + VEHICLE_SPACING
        d = max(v.distance_to_stopline - speed, floor)
        v.distance_to_stopline = d
        if leader_d is None and d <= 0.0:
            if v.route_pos == len(v.route) - 1:
                v.mode = Mode.ARRIVED
                v.arrival_time = now
                arrived += 1
                continue
            v.mode = Mode.QUEUED
            leader_queued = True
        elif leader_queued and d <= floor:
            v.mode = Mode.QUEUED
        else:
            leader_queued = False
        leader_d = d
    if arrived:
        # arrivals can only be at the front of a sink lane
        remaining = [v for v in vehs if v.mode is not Mode.ARRIVED]
        for v in vehs[: len(vehs) - len(remaining)]:
            state.records[v.id] = (v.id, v.entry_time, v.arrival_time)
            del state.vehicles[v.id]
        state.lanes[lane_id] = remaining
        state.arrived += arrived


def _discharge(state: SimState, inter_id: str) -> None:
    net = state.network
    node = net.intersections[inter_id]
    sig = state.signals[inter_id]
    if sig.stage is not Stage.GREEN:
        return
    green = sig.green_active
    phase_moves = set(node.phase_set.phases[sig.active_phase].movements) if green else set()
    headway = state.config.saturation_headway
    now = state.clock
    through_now: list[tuple] = []
    rights: list[tuple[str, Any]] = []
    for lane_id in node.entry_lanes:
        vehs = state.lanes[lane_id]
        if not vehs or vehs[0].mode is not Mode.QUEUED or vehs[0].distance_to_stopline > 0.0:
            continue
        head = vehs[0]
        mv = net.movement_between(lane_id, head.route[head.route_pos + 1])
        if mv is None:
            continue
        if mv.turn is Turn.RIGHT:
            rights.append((lane_id, mv))
            continue
        if mv.id not in phase_moves:
            continue
        if now - state.last_discharge[lane_id] < headway or not _has_space(state, mv.to_lane):
            continue
        _cross(state, lane_id, mv.to_lane)
        state.discharges.append((inter_id, lane_id, mv.turn.value))
        if mv.turn is Turn.THROUGH:
            through_now.append((mv.approach, mv.turn))
    for lane_id, mv in rights:
        if now - state.last_discharge[lane_id] < headway or not _has_space(state, mv.to_lane):
            continue
        if any(movements_conflict((mv.approach, mv.turn), g) for g in through_now):
            continue
        _cross(state, lane_id, mv.to_lane)
        state.discharges.append((inter_id, lane_id, mv.turn.value))


def _pass_through(state: SimState, lane_id: str) -> None:
    """Road continuation through an unsignalised node, subject to headway and space."""
    vehs = state.lanes[lane_id]
    if not vehs or vehs[0].mode is not Mode.QUEUED or vehs[0].distance_to_stopline > 0.0:
        return
    head = vehs[0]
    nxt = head.route[head.route_pos + 1]
    if state.clock - state.last_discharge[lane_id] >= state.config.saturation_headway and _has_space(state, nxt):
        _cross(state, lane_id, nxt)


def _cross(state: SimState, lane_id: str, to_lane: str) -> None:
    veh = state.lanes[lane_id].pop(0)
    state.last_discharge[lane_id] = state.clock
    veh.route_pos += 1
    _place(state, veh, to_lane)


def step(state: SimState, dt: int = 1) -> SimState:
    """Advance the simulation by ``dt`` one-second ticks."""
    for _ in range(dt):
        cfg = state.config
        state.discharges = []
        now = state.clock + 1
        for lane_id, vehs in state.lanes.items():
            if vehs:
                _advance_lane(state, lane_id, cfg.free_flow_speed, now)
        for inter_id in state.signals:
            _discharge(state, inter_id)
        for lane_id in state.unsignalised:
            _pass_through(state, lane_id)
        for inter_id, sig in state.signals.items():
            state.signals[inter_id] = _advance_signal(sig, cfg)
        state.clock = now
    return state


# ---------------------------------------------------------------- episodes

@dataclass
class DecisionPoint:
    """What a controller sees when an intersection's green expires."""

    intersection: str
    clock: int
    observation: np.ndarray
    state: SimState
    neighbors: Any = None  # neighbour contexts when requested by run_episode


@dataclass
class DecisionRecord:
    intersection: str
    clock: int
    observation: np.ndarray
    k: int
    x: float
    clamped: bool = False
    vector: np.ndarray | None = None  # full duration vector proposed by the controller
    reward: float | None = None  # credited at the next decision of this intersection
    next_index: int | None = None
    neighbors: Any = None


@dataclass
class EpisodeLog:
    horizon: int
    vehicles: list[tuple[int, int, int | None]]
    decisions: list[DecisionRecord]
    meta: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "header", "horizon": self.horizon, **self.meta}, sort_keys=True)]
        for vid, entry, arrival in self.vehicles:
            lines.append(json.dumps({"type": "vehicle", "id": vid, "entry_time": entry, "arrival_time": arrival}))
        for rec in self.decisions:
            lines.append(json.dumps({
                "type": "decision", "intersection": rec.intersection, "clock": rec.clock,
                "observation": [float(v) for v in rec.observation], "k": rec.k, "x": rec.x,
                "clamped": rec.clamped, "reward": rec.reward,
                "vector": None if rec.vector is None else [float(v) for v in rec.vector],
            }))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeLog":
        horizon, meta, vehicles, decisions = 0, {}, [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "header":
                horizon = rec.pop("horizon")
                meta = rec
            elif kind == "vehicle":
                vehicles.append((rec["id"], rec["entry_time"], rec["arrival_time"]))
            else:
                vec = rec.get("vector")
                decisions.append(DecisionRecord(
                    rec["intersection"], rec["clock"], np.asarray(rec["observation"]), rec["k"], rec["x"],
                    rec["clamped"], None if vec is None else np.asarray(vec), rec["reward"],
                ))
        return cls(horizon, vehicles, decisions, meta)


Controller = Callable[[DecisionPoint], tuple]


def run_episode(
    network: RoadNetwork,
    flow: FlowSpec,
    controller: Controller,
    horizon: int = 3600,
    config: SimConfig = SimConfig(),
    seed: int = 0,
    neighbor_contexts: bool = False,
    on_step: Callable[[SimState], None] | None = None,
    validate: bool = True,
) -> EpisodeLog:
    """Simulate until ``clock == horizon``, querying the controller at each green expiry.

    The controller returns ``(k, x_k)`` or ``(k, x_k, vector)``. Vehicles still in
    the network at the horizon are left unfinished.
    """
    from .observe import intersection_observation, reward
    from .neighbor import gather_contexts

    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if validate:
        checked = set()
        for f in flow:
            if f.route not in checked:
                validate_route(network, f.route)
                checked.add(f.route)
    state = initial_state(network, config, seed)
    decisions: list[DecisionRecord] = []
    last_index: dict[str, int] = {}
    last_vector: dict[str, np.ndarray] = {}
    while state.clock < horizon:
        for inter_id, sig in state.signals.items():
            if not sig.at_decision_point:
                continue
            obs = intersection_observation(state, inter_id)
            prev = last_index.get(inter_id)
            if prev is not None:
                decisions[prev].reward = reward(state, inter_id)
                decisions[prev].next_index = len(decisions)
            ctx = gather_contexts(state, inter_id, last_vector) if neighbor_contexts else None
            action = controller(DecisionPoint(inter_id, state.clock, obs, state, ctx))
            k, x = int(action[0]), float(action[1])
            vector = None if len(action) < 3 or action[2] is None else np.asarray(action[2], dtype=float)
            K = network.intersections[inter_id].phase_set.K
            if not 0 <= k < K:
                raise ControllerError(f"controller chose phase {k} at {inter_id!r}; valid range is [0, {K})")
            state.signals[inter_id], clamped = apply_phase_command(sig, k, x, config)
            if vector is not None:
                last_vector[inter_id] = vector
            last_index[inter_id] = len(decisions)
            decisions.append(DecisionRecord(inter_id, state.clock, obs, k, x, clamped, vector, neighbors=ctx))
        inject_vehicles(state, flow)
        step(state)
        if on_step is not None:
            on_step(state)
    vehicles = [(vid, entry, arrival) for vid, entry, arrival in state.records]
    # vehicles scheduled before the horizon but never released from the boundary
    for n in range(state.flow_cursor, len(flow)):
        if flow[n].t < horizon:
            vehicles.append((n, flow[n].t, None))
    return EpisodeLog(horizon, vehicles, decisions)


def transitions(log: EpisodeLog):
    """Yield (record, next_record) pairs for decisions whose reward has been credited."""
    for rec in log.decisions:
        if rec.reward is not None and rec.next_index is not None:
            yield rec, log.decisions[rec.next_index]
