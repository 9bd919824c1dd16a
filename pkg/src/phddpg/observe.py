"""Per-intersection observations and queue-length rewards."""
from __future__ import annotations

import numpy as np

from .network import RoadNetwork
from .sim import Mode, SimState

LANE_FEATURES = 6  # q, m, v1..v4


def lane_observation(state: SimState, lane_id: str) -> tuple[int, int, int, int, int, int]:
    """(queued, moving, v1, v2, v3, v4) with v_i counting distances in [100(i-1), 100i)."""
    lane = state.network.lanes[lane_id]
    q = m = 0
    seg = [0] * lane.segment_count
    for v in state.lanes[lane_id]:
        if v.mode is Mode.QUEUED:
            q += 1
        else:
            m += 1
        i = int(v.distance_to_stopline // lane.segment_length)
        if i < lane.segment_count:
            seg[i] += 1
    return (q, m, *seg)


def observation_size(network: RoadNetwork, intersection: str) -> int:
    node = network.intersections[intersection]
    return LANE_FEATURES * len(node.entry_lanes) + node.phase_set.K + 1


def intersection_observation(state: SimState, intersection: str) -> np.ndarray:
    """Lane blocks in (approach, turn) order, then the active-phase one-hot and elapsed green."""
    node = state.network.intersections[intersection]
    sig = state.signals[intersection]
    K = node.phase_set.K
    out = np.zeros(LANE_FEATURES * len(node.entry_lanes) + K + 1)
    for i, lane_id in enumerate(node.entry_lanes):
        out[LANE_FEATURES * i: LANE_FEATURES * (i + 1)] = lane_observation(state, lane_id)
    out[LANE_FEATURES * len(node.entry_lanes) + sig.active_phase] = 1.0
    out[-1] = float(sig.phase_elapsed)
    return out


def lane_block(observation: np.ndarray, n_lanes: int = 12) -> np.ndarray:
    return observation[: LANE_FEATURES * n_lanes].reshape(n_lanes, LANE_FEATURES)


def reward(state: SimState, intersection: str) -> float:
    """Negative total queue over the intersection's entry lanes."""
    node = state.network.intersections[intersection]
    total = 0
    for lane_id in node.entry_lanes:
        for v in state.lanes[lane_id]:
            if v.mode is Mode.QUEUED:
                total += 1
    return -float(total) if total else 0.0
