"""Signal controllers: FixedTime, MaxPressure, random collection, and agent-driven variants.

A controller is a callable taking a ``DecisionPoint`` and returning ``(k, x_k)``
or ``(k, x_k, vector)``. Any per-intersection memory lives in the signal state
(``prev_duration``, ``active_phase``), so controllers stay pure functions of the
decision point unless they draw random numbers.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .network import RoadNetwork
from .sim import DecisionPoint

VARIANTS = ("full", "cycle", "conservative", "conservative_cycle", "nb")
CONSERVATIVE_MARGIN = 5.0


def _first_decision(dp: DecisionPoint) -> bool:
    return dp.state.signals[dp.intersection].prev_duration is None


def fixed_time_controller(plan: Sequence[float] | float = 30.0, order: Sequence[int] | None = None) -> Callable:
    """Cycle through phases with fixed greens; ``order`` defaults to each intersection's cycle order."""

    def controller(dp: DecisionPoint):
        ps = dp.state.network.intersections[dp.intersection].phase_set
        cycle = tuple(order) if order is not None else ps.cycle_order
        durations = [float(plan)] * ps.K if np.isscalar(plan) else [float(v) for v in plan]
        if _first_decision(dp):
            k = cycle[0]
        else:
            cur = dp.state.signals[dp.intersection].active_phase
            k = cycle[(cycle.index(cur) + 1) % len(cycle)]
        return k, durations[k]

    return controller


def phase_pressures(network: RoadNetwork, intersection: str, count: Callable[[str], int]) -> np.ndarray:
    """Sum over each phase's movements of upstream minus downstream lane count."""
    ps = network.intersections[intersection].phase_set
    out = np.zeros(ps.K)
    for k, phase in enumerate(ps.phases):
        total = 0
        for mid in phase.movements:
            m = network.movements[mid]
            total += count(m.from_lane) - count(m.to_lane)
        out[k] = total
    return out


def max_pressure_controller(x_fixed: float = 20.0) -> Callable:
    def controller(dp: DecisionPoint):
        p = phase_pressures(dp.state.network, dp.intersection, dp.state.lane_count)
        return int(np.argmax(p)), float(x_fixed)

    return controller


def random_collection_policy(seed: int = 0, x_min: float = 10.0, x_max: float = 40.0) -> Callable:
    rng = np.random.default_rng(seed)

    def controller(dp: DecisionPoint):
        K = dp.state.network.intersections[dp.intersection].phase_set.K
        return int(rng.integers(K)), float(rng.uniform(x_min, x_max))

    return controller


def cycle_select(q: Sequence[float], k_current: int, cycle_order: Sequence[int]) -> int:
    """Keep the current phase unless its successor has a strictly higher estimate."""
    cycle = list(cycle_order)
    k_next = cycle[(cycle.index(k_current) + 1) % len(cycle)]
    return k_current if q[k_current] >= q[k_next] else k_next


def conservative_clamp(x_new: float, x_prev: float | None, bounds: tuple[float, float] = (10.0, 40.0),
                       margin: float = CONSERVATIVE_MARGIN) -> float:
    x = float(x_new)
    if x_prev is not None:
        x = min(max(x, x_prev - margin), x_prev + margin)
        # x_prev + margin can round up by one ulp; step inward until the difference is exact
        while x - x_prev > margin:
            x = math.nextafter(x, -math.inf)
        while x_prev - x > margin:
            x = math.nextafter(x, math.inf)
    return min(max(x, bounds[0]), bounds[1])


def agent_controller(agent, variant: str = "full", explore_sigma: float = 0.0,
                     rng: np.random.Generator | None = None) -> Callable:
    """Deployment policy for a trained agent under one of the variants.

    ``explore_sigma`` adds Gaussian jitter to the executed duration (clamped to the
    duration bounds); the stored vector keeps the actor's noiseless proposal.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    rng = rng if rng is not None else np.random.default_rng(0)
    bounds = (agent.arch.x_min, agent.arch.x_max)

    def controller(dp: DecisionPoint):
        x_vec, q = agent.act(dp.observation, dp.neighbors)
        sig = dp.state.signals[dp.intersection]
        if variant in ("cycle", "conservative_cycle"):
            ps = dp.state.network.intersections[dp.intersection].phase_set
            k = cycle_select(q, sig.active_phase, ps.cycle_order)
        else:
            k = int(np.argmax(q))
        x = float(x_vec[k])
        if explore_sigma > 0:
            x = float(np.clip(x + rng.normal(0.0, explore_sigma), *bounds))
        if variant in ("conservative", "conservative_cycle"):
            x = conservative_clamp(x, sig.prev_duration, bounds)
        return k, x, x_vec

    return controller


def baseline(name: str, seed: int = 0) -> Callable:
    name = name.lower().replace("-", "_")
    if name in ("fixedtime", "fixed_time", "fixed"):
        return fixed_time_controller()
    if name in ("maxpressure", "max_pressure", "mp"):
        return max_pressure_controller()
    if name == "random":
        return random_collection_policy(seed)
    raise ValueError(f"unknown baseline {name!r}")
