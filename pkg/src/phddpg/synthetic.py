"""Synthetic contextual environment with separable per-phase rewards.

States use the intersection observation layout; the reward of (k, x_k) depends
only on phase k's own load and its own duration, so the true reward Jacobian with
respect to the duration vector is diagonal. Used to measure how well a trained
critic isolates each phase's dependence on its own duration.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent import Architecture, PHDDPGAgent, ReplayBuffer
from .observe import LANE_FEATURES


def random_observations(arch: Architecture, n: int, rng: np.random.Generator) -> np.ndarray:
    obs = np.zeros((n, arch.obs_dim))
    lanes = arch.n_lanes
    q = rng.poisson(rng.uniform(0.5, 8.0, size=(n, lanes)))
    m = rng.poisson(rng.uniform(0.5, 6.0, size=(n, lanes)))
    block = np.zeros((n, lanes, LANE_FEATURES))
    block[:, :, 0], block[:, :, 1] = q, m
    # queued vehicles sit in the first segment, moving ones spread over the rest
    first = rng.binomial(m, 0.25)
    block[:, :, 2] = q + first
    rest = m - first
    for seg in range(3, LANE_FEATURES):
        take = rng.binomial(rest, 0.5) if seg < LANE_FEATURES - 1 else rest
        block[:, :, seg] = take
        rest = rest - take
    obs[:, : arch.lane_width] = block.reshape(n, -1)
    obs[np.arange(n), arch.lane_width + rng.integers(arch.K, size=n)] = 1.0
    obs[:, -1] = rng.uniform(arch.x_min, arch.x_max, size=n)
    return obs


def phase_load(arch: Architecture, obs: np.ndarray) -> np.ndarray:
    """(n, K) summed queue over each phase's member lanes."""
    q = obs[:, : arch.lane_width].reshape(len(obs), arch.n_lanes, LANE_FEATURES)[:, :, 0]
    return q @ (arch.membership > 0).T.astype(float)


def separable_reward(arch: Architecture, obs: np.ndarray, k: np.ndarray, x: np.ndarray, gain: float = 0.5) -> np.ndarray:
    """Negative load of the served phase, relieved in proportion to its own green time."""
    load = phase_load(arch, obs)[np.arange(len(k)), k]
    frac = (np.asarray(x) - arch.x_min) / (arch.x_max - arch.x_min)
    return -load * (1.0 - gain * frac)


def separable_buffer(arch: Architecture, n: int, seed: int = 0, capacity: int = 100_000) -> ReplayBuffer:
    """Uniform random (k, x_k) on random states, like a random-policy dataset."""
    rng = np.random.default_rng(seed)
    obs = random_observations(arch, n, rng)
    obs2 = random_observations(arch, n, rng)
    k = rng.integers(arch.K, size=n)
    x = rng.uniform(arch.x_min, arch.x_max, size=n)
    r = separable_reward(arch, obs, k, x)
    buf = ReplayBuffer(capacity, arch.obs_dim)
    for i in range(n):
        buf.push(obs[i], int(k[i]), float(x[i]), float(r[i]), obs2[i])
    return buf


@dataclass
class SeparableRun:
    diagonals: list[float] = field(default_factory=list)
    matrices: list[np.ndarray] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def train_separable(agent: PHDDPGAgent, buffer: ReplayBuffer, episodes: int, steps: int,
                    probe: np.ndarray) -> SeparableRun:
    """Offline training on the synthetic buffer; the contribution matrix is taken after every episode."""
    from .training import diagnose

    run = SeparableRun()
    for _ in range(episodes):
        losses = [agent.train_step(buffer)[0] for _ in range(steps)]
        c = diagnose(agent, probe)
        run.diagonals.append(c.mean_diagonal)
        run.matrices.append(c.matrix)
        run.losses.append(float(np.mean(losses)))
    return run
