"""Neighbour-intersection embedding for the NB variant.

Each neighbour contributes one row built from its lane block, its latest commanded
duration vector, a learned direction embedding and a lifted distance. Rows are
mixed by self-attention, squashed by a sigmoid and mean-pooled into a fixed-width
vector that is appended to the intersection's own observation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .observe import LANE_FEATURES, intersection_observation

MAX_NEIGHBORS = 4
EMBED_WIDTH = 16
DIRECTION_WIDTH = 8
DISTANCE_WIDTH = 8
DISTANCE_SCALE = 1000.0


@dataclass
class NeighborContext:
    """Contexts of one intersection's neighbours, one row each."""

    lane_blocks: np.ndarray  # (n, lanes * 6)
    durations: np.ndarray  # (n, K) latest commanded duration vectors
    directions: np.ndarray  # (n,) ints in 0..3
    distances: np.ndarray  # (n,) metres

    def __len__(self) -> int:
        return len(self.directions)


@dataclass
class NeighborBatch:
    """Padded contexts for a batch: rows beyond ``mask`` are padding."""

    lane_blocks: np.ndarray  # (B, M, lanes * 6)
    durations: np.ndarray  # (B, M, K)
    directions: np.ndarray  # (B, M)
    distances: np.ndarray  # (B, M)
    mask: np.ndarray  # (B, M) bool

    @classmethod
    def stack(cls, contexts: list[NeighborContext | None], lane_width: int, K: int) -> "NeighborBatch":
        B, M = len(contexts), MAX_NEIGHBORS
        out = cls(np.zeros((B, M, lane_width)), np.zeros((B, M, K)), np.zeros((B, M), dtype=np.int64),
                  np.ones((B, M)), np.zeros((B, M), dtype=bool))
        for b, ctx in enumerate(contexts):
            if ctx is None:
                continue
            n = min(len(ctx), M)
            out.lane_blocks[b, :n] = ctx.lane_blocks[:n]
            out.durations[b, :n] = ctx.durations[:n]
            out.directions[b, :n] = ctx.directions[:n]
            out.distances[b, :n] = ctx.distances[:n]
            out.mask[b, :n] = True
        return out


def gather_contexts(state, intersection: str, last_vectors: dict) -> NeighborContext:
    """Read neighbour lane blocks from the live state plus their last commanded durations."""
    net = state.network
    nbs = net.neighbor_map.get(intersection, ())
    K = net.intersections[intersection].phase_set.K
    lanes = len(net.intersections[intersection].entry_lanes)
    mid = 0.5 * (state.config.x_min + state.config.x_max)
    blocks = np.zeros((len(nbs), lanes * LANE_FEATURES))
    durs = np.full((len(nbs), K), mid)
    for i, nb in enumerate(nbs):
        obs = intersection_observation(state, nb.intersection)
        blocks[i] = obs[: lanes * LANE_FEATURES]
        vec = last_vectors.get(nb.intersection)
        if vec is not None and len(vec) == K:
            durs[i] = vec
    return NeighborContext(
        blocks, durs,
        np.array([int(nb.direction) for nb in nbs], dtype=np.int64),
        np.array([nb.distance for nb in nbs], dtype=float),
    )


def build_params(params: ad.ParamSet, prefix: str, lane_width: int, K: int) -> None:
    params.add(f"{prefix}.direction", (4, DIRECTION_WIDTH), DIRECTION_WIDTH)
    params.dense(f"{prefix}.distance", 1, DISTANCE_WIDTH)
    width = lane_width + K + DIRECTION_WIDTH + DISTANCE_WIDTH
    params.dense(f"{prefix}.q", width, EMBED_WIDTH)
    params.dense(f"{prefix}.k", width, EMBED_WIDTH, bias=False)
    params.dense(f"{prefix}.v", width, EMBED_WIDTH)


def neighbor_embedding(
    params: ad.ParamSet, prefix: str, batch: NeighborBatch,
    feature_scale: float = 0.1, x_min: float = 10.0, x_max: float = 40.0,
) -> ad.Tensor:
    """(B, 16) embedding; intersections without neighbours get the zero vector."""
    B, M = batch.mask.shape
    lanes = ad.Tensor(batch.lane_blocks * feature_scale)
    durs = ad.Tensor((batch.durations - x_min) / (x_max - x_min))
    e_dir = ad.take_rows(params[f"{prefix}.direction"], batch.directions)
    dist = ad.Tensor((batch.distances / DISTANCE_SCALE)[..., None])
    e_dist = ad.dense(dist, params[f"{prefix}.distance.W"], params[f"{prefix}.distance.b"])
    gamma = ad.concat([lanes, durs, e_dir, e_dist], axis=-1)
    q = ad.dense(gamma, params[f"{prefix}.q.W"], params[f"{prefix}.q.b"])
    k = ad.dense(gamma, params[f"{prefix}.k.W"])
    v = ad.dense(gamma, params[f"{prefix}.v.W"], params[f"{prefix}.v.b"])
    rows = ad.sigmoid(ad.scaled_dot_attention(q, k, v, EMBED_WIDTH, mask=batch.mask))
    weights = batch.mask.astype(float)
    count = weights.sum(axis=1, keepdims=True)
    weights = np.where(count > 0, weights / np.maximum(count, 1.0), 0.0)
    return ad.sum_(ad.mul(rows, weights[..., None]), axis=1)


def augment_state(obs, e_nb):
    """Append the neighbour embedding to the observation vector(s)."""
    if isinstance(obs, ad.Tensor) or isinstance(e_nb, ad.Tensor):
        return ad.concat([ad.as_tensor(obs), ad.as_tensor(e_nb)], axis=-1)
    return np.concatenate([np.asarray(obs), np.asarray(e_nb)], axis=-1)
