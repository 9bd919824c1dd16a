"""PH-DDPG agent: vector-valued critic, duration actor, action-parameter mask and replay.

The critic maps (state, duration vector) to one estimated reward per phase; the
actor proposes a duration for every phase at once. During critic training the
durations of phases that were not executed are replaced by noise drawn from the
batch's own duration statistics, so each head learns to depend on its own
duration only.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParamSet, Tensor
from .neighbor import EMBED_WIDTH, NeighborBatch, NeighborContext, augment_state, build_params, neighbor_embedding
from .network import RoadNetwork
from .observe import LANE_FEATURES

MASK_STRATEGIES = ("gaussian", "mean", "zero", "none")


class DivergenceError(FloatingPointError):
    """A loss or objective became non-finite."""


@dataclass(frozen=True)
class AgentConfig:
    d_model: int = 32
    head_width: int = 32
    alpha: float = 0.5
    x_min: float = 10.0
    x_max: float = 40.0
    gamma: float = 0.8
    tau: float = 0.005
    policy_delay: int = 2
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    batch_size: int = 80
    buffer_capacity: int = 100_000
    explore_sigma: float = 2.0
    mask: str = "gaussian"
    reward_scale: float = 0.05
    feature_scale: float = 0.1
    neighbors: bool = False


@dataclass(eq=False)
class Architecture:
    """Layout-dependent constants shared by actor and critic."""

    K: int
    membership: np.ndarray  # (K, lanes) mean-pooling weights from lanes to phases
    n_lanes: int = 12
    d_model: int = 32
    head_width: int = 32
    alpha: float = 0.5
    x_min: float = 10.0
    x_max: float = 40.0
    feature_scale: float = 0.1
    neighbors: bool = False

    @property
    def obs_dim(self) -> int:
        return LANE_FEATURES * self.n_lanes + self.K + 1

    @property
    def lane_width(self) -> int:
        return LANE_FEATURES * self.n_lanes

    @classmethod
    def from_network(cls, network: RoadNetwork, intersection: str, cfg: AgentConfig) -> "Architecture":
        node = network.intersections[intersection]
        ps = node.phase_set
        lanes = list(node.entry_lanes)
        M = np.zeros((ps.K, len(lanes)))
        for k, phase in enumerate(ps.phases):
            members = {network.movements[m].from_lane for m in phase.movements}
            for lane in members:
                M[k, lanes.index(lane)] = 1.0
            M[k] /= max(1.0, M[k].sum())
        return cls(ps.K, M, len(lanes), cfg.d_model, cfg.head_width, cfg.alpha, cfg.x_min, cfg.x_max,
                   cfg.feature_scale, cfg.neighbors)

    def signature(self) -> dict:
        return {"K": self.K, "n_lanes": self.n_lanes, "d_model": self.d_model, "head_width": self.head_width,
                "alpha": self.alpha, "x_min": self.x_min, "x_max": self.x_max,
                "feature_scale": self.feature_scale, "neighbors": self.neighbors,
                "membership": self.membership.tolist()}


# ---------------------------------------------------------------- parameters

def attention_params(p: ParamSet, prefix: str, width: int, d: int) -> None:
    # a key bias shifts every logit of a row equally, which softmax ignores, so keys get none
    p.dense(f"{prefix}.q", width, d)
    p.dense(f"{prefix}.k", width, d, bias=False)
    p.dense(f"{prefix}.v", width, d)


def _fem_params(p: ParamSet, arch: Architecture) -> None:
    d = arch.d_model
    p.dense("fem.lane", LANE_FEATURES, d)
    p.dense("fem.fuse", d + 2 + (EMBED_WIDTH if arch.neighbors else 0), d)
    attention_params(p, "fem.attn", d, d)
    if arch.neighbors:
        build_params(p, "nb", arch.lane_width, arch.K)


def build_critic(arch: Architecture, rng: np.random.Generator) -> ParamSet:
    p = ParamSet(rng)
    _fem_params(p, arch)
    d = arch.d_model
    attention_params(p, "embed", d + 1, d)
    p.dense("head.hidden", d, arch.head_width)
    p.add("head.out.W", (arch.K, arch.head_width), arch.head_width)
    p.add("head.out.b", (arch.K,), arch.head_width)
    return p


def build_actor(arch: Architecture, rng: np.random.Generator) -> ParamSet:
    p = ParamSet(rng)
    _fem_params(p, arch)
    p.dense("head.hidden", arch.d_model, arch.head_width)
    p.add("head.out.W", (arch.K, arch.head_width), arch.head_width)
    p.add("head.out.b", (arch.K,), arch.head_width)
    return p


# ---------------------------------------------------------------- forward passes

def _dense(p: ParamSet, name: str, x: Tensor) -> Tensor:
    bias = f"{name}.b"
    return ad.dense(x, p[f"{name}.W"], p[bias] if bias in p else None)


def _attention_block(p: ParamSet, prefix: str, x: Tensor, d_k: int) -> Tensor:
    return ad.scaled_dot_attention(_dense(p, f"{prefix}.q", x), _dense(p, f"{prefix}.k", x), _dense(p, f"{prefix}.v", x), d_k)


def state_input(p: ParamSet, arch: Architecture, obs, neighbors: NeighborBatch | None = None) -> Tensor:
    """Observation batch as a tensor, augmented with the neighbour embedding when enabled."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    if not arch.neighbors:
        return Tensor(obs)
    if neighbors is None:
        neighbors = NeighborBatch.stack([None] * obs.shape[0], arch.lane_width, arch.K)
    e_nb = neighbor_embedding(p, "nb", neighbors, arch.feature_scale, arch.x_min, arch.x_max)
    return augment_state(Tensor(obs), e_nb)


def fem_forward(p: ParamSet, arch: Architecture, state: Tensor) -> Tensor:
    """Phase features (B, K, d): embedded lanes pooled per phase, fused with phase status, then self-attention."""
    B, L, K = state.shape[0], arch.n_lanes, arch.K
    lanes = ad.reshape(ad.slice_last(state, 0, arch.lane_width), (B, L, LANE_FEATURES))
    lanes = ad.mul(lanes, arch.feature_scale)
    emb = ad.relu(_dense(p, "fem.lane", lanes))
    pooled = ad.matmul(Tensor(arch.membership), emb)
    base = arch.lane_width
    onehot = ad.reshape(ad.slice_last(state, base, base + K), (B, K, 1))
    elapsed = ad.mul(ad.slice_last(state, base + K, base + K + 1), 1.0 / arch.x_max)
    parts = [pooled, onehot, ad.expand(ad.reshape(elapsed, (B, 1, 1)), (B, K, 1))]
    if arch.neighbors:
        e_nb = ad.slice_last(state, base + K + 1, base + K + 1 + EMBED_WIDTH)
        parts.append(ad.expand(ad.reshape(e_nb, (B, 1, EMBED_WIDTH)), (B, K, EMBED_WIDTH)))
    fused = ad.relu(_dense(p, "fem.fuse", ad.concat(parts, axis=-1)))
    return ad.affine_mix(arch.alpha, fused, _attention_block(p, "fem.attn", fused, arch.d_model))


def param_embed(p: ParamSet, arch: Architecture, H: Tensor, x, alpha: float | None = None) -> Tensor:
    """Mix phase features with attention over [features, normalised duration] rows."""
    alpha = arch.alpha if alpha is None else alpha
    x = ad.as_tensor(x)
    if x.shape != H.shape[:2]:
        raise ad.ShapeError("param_embed", f"durations {x.shape} do not match features {H.shape}")
    xn = ad.mul(ad.add(x, -arch.x_min), 1.0 / (arch.x_max - arch.x_min))
    gamma = ad.concat([H, ad.reshape(xn, xn.shape + (1,))], axis=-1)
    return ad.affine_mix(alpha, H, _attention_block(p, "embed", gamma, arch.d_model))


def _heads(p: ParamSet, H: Tensor) -> Tensor:
    hidden = ad.relu(_dense(p, "head.hidden", H))
    return ad.add(ad.sum_(ad.mul(hidden, p["head.out.W"]), axis=-1), p["head.out.b"])


def critic_forward(p: ParamSet, arch: Architecture, obs, x, neighbors: NeighborBatch | None = None) -> Tensor:
    """Estimated reward per phase, shape (B, K)."""
    H = fem_forward(p, arch, state_input(p, arch, obs, neighbors))
    return _heads(p, param_embed(p, arch, H, x))


def actor_forward(p: ParamSet, arch: Architecture, obs, neighbors: NeighborBatch | None = None) -> Tensor:
    """Duration for every phase, shape (B, K), inside [x_min, x_max]."""
    H = fem_forward(p, arch, state_input(p, arch, obs, neighbors))
    squashed = ad.sigmoid(_heads(p, H))
    return ad.add(ad.mul(squashed, arch.x_max - arch.x_min), arch.x_min)


# ---------------------------------------------------------------- mask

@dataclass
class BatchStats:
    mean: np.ndarray  # (K,)
    var: np.ndarray  # (K,)


def batch_stats(k: np.ndarray, x: np.ndarray, K: int) -> BatchStats:
    """Per-phase mean/variance of executed durations, falling back to batch-wide values under 2 samples."""
    k, x = np.asarray(k), np.asarray(x, dtype=float)
    g_mean, g_var = float(x.mean()), float(x.var())
    mean, var = np.full(K, g_mean), np.full(K, g_var)
    for j in range(K):
        sel = x[k == j]
        if sel.size >= 2:
            mean[j], var[j] = sel.mean(), sel.var()
    return BatchStats(mean, var)


def mask(k: int, x_k: float, stats: BatchStats, rng: np.random.Generator,
         strategy: str = "gaussian", bounds: tuple[float, float] = (10.0, 40.0), clamp: bool = True) -> np.ndarray:
    """Rebuild a full duration vector around the executed (k, x_k); component k is x_k exactly."""
    return mask_batch(np.array([k]), np.array([x_k], dtype=float), stats, rng, strategy, bounds, clamp)[0]


def mask_batch(ks: np.ndarray, xs: np.ndarray, stats: BatchStats, rng: np.random.Generator,
               strategy: str = "gaussian", bounds: tuple[float, float] = (10.0, 40.0), clamp: bool = True) -> np.ndarray:
    ks = np.asarray(ks, dtype=np.int64)
    xs = np.asarray(xs, dtype=float)
    B, K = ks.shape[0], stats.mean.shape[0]
    if strategy == "gaussian":
        out = rng.normal(stats.mean, np.sqrt(stats.var), size=(B, K))
    elif strategy == "mean":
        out = np.broadcast_to(stats.mean, (B, K)).copy()
    elif strategy == "zero":
        out = np.zeros((B, K))
    elif strategy == "none":
        # no reconstruction: the executed duration fills every slot
        return np.repeat(xs[:, None], K, axis=1)
    else:
        raise ValueError(f"unknown mask strategy {strategy!r}; expected one of {MASK_STRATEGIES}")
    if clamp and strategy != "zero":
        np.clip(out, bounds[0], bounds[1], out=out)
    out[np.arange(B), ks] = xs
    return out


# ---------------------------------------------------------------- replay

@dataclass
class Batch:
    obs: np.ndarray
    k: np.ndarray
    x: np.ndarray
    r: np.ndarray
    obs2: np.ndarray
    nb: NeighborBatch | None = None
    nb2: NeighborBatch | None = None

    def __len__(self) -> int:
        return len(self.k)


class ReplayBuffer:
    """FIFO ring buffer of (s, k, x_k, r, s') with uniform sampling without replacement."""

    def __init__(self, capacity: int, obs_dim: int):
        self.capacity = int(capacity)
        self.obs_dim = obs_dim
        n = min(self.capacity, 1024)
        self._obs = np.zeros((n, obs_dim))
        self._obs2 = np.zeros((n, obs_dim))
        self._k = np.zeros(n, dtype=np.int64)
        self._x = np.zeros(n)
        self._r = np.zeros(n)
        self._nb: list = [None] * n
        self._nb2: list = [None] * n
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def _grow(self) -> None:
        n = min(self.capacity, 2 * self._k.shape[0])
        for name in ("_obs", "_obs2", "_k", "_x", "_r"):
            old = getattr(self, name)
            new = np.zeros((n,) + old.shape[1:], dtype=old.dtype)
            new[: old.shape[0]] = old
            setattr(self, name, new)
        self._nb.extend([None] * (n - len(self._nb)))
        self._nb2.extend([None] * (n - len(self._nb2)))

    def push(self, obs, k: int, x: float, r: float, obs2, nb: NeighborContext | None = None,
             nb2: NeighborContext | None = None) -> None:
        if self._next >= self._k.shape[0] and self._k.shape[0] < self.capacity:
            self._grow()
        i = self._next
        self._obs[i], self._k[i], self._x[i], self._r[i], self._obs2[i] = obs, k, x, r, obs2
        self._nb[i], self._nb2[i] = nb, nb2
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.size) + self._next) % self.capacity

    def contents(self) -> Batch:
        return self._gather(self._order())

    def sample(self, n: int, rng: np.random.Generator | int) -> Batch:
        if n > self.size:
            raise ValueError(f"replay buffer holds {self.size} transitions; cannot sample {n}")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        idx = rng.choice(self.size, size=n, replace=False)
        return self._gather(self._order()[idx])

    def _gather(self, idx: np.ndarray, K: int | None = None) -> Batch:
        nb = [self._nb[i] for i in idx]
        nb2 = [self._nb2[i] for i in idx]
        batch = Batch(self._obs[idx], self._k[idx], self._x[idx], self._r[idx], self._obs2[idx])
        if any(c is not None for c in nb):
            K = next(c.durations.shape[1] for c in nb if c is not None)
            width = next(c.lane_blocks.shape[1] for c in nb if c is not None)
            batch.nb = NeighborBatch.stack(nb, width, K)
            batch.nb2 = NeighborBatch.stack(nb2, width, K)
        return batch

    def save(self, path: str | Path) -> None:
        order = self._order()
        arrays = {
            "obs": self._obs[order], "k": self._k[order], "x": self._x[order], "r": self._r[order],
            "obs2": self._obs2[order], "capacity": np.array(self.capacity),
        }
        if any(self._nb[i] is not None for i in order):
            arrays["nb"] = np.array(
                json.dumps([_ctx_to_json(self._nb[i]) for i in order] + [_ctx_to_json(self._nb2[i]) for i in order])
            )
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path: str | Path, capacity: int | None = None) -> "ReplayBuffer":
        with np.load(path) as data:
            obs = data["obs"]
            buf = cls(int(capacity or data["capacity"]), obs.shape[1])
            n = obs.shape[0]
            ctxs = None
            if "nb" in data:
                raw = json.loads(str(data["nb"]))
                ctxs = [_ctx_from_json(c) for c in raw]
            for i in range(n):
                nb = nb2 = None
                if ctxs is not None:
                    nb, nb2 = ctxs[i], ctxs[n + i]
                buf.push(obs[i], int(data["k"][i]), float(data["x"][i]), float(data["r"][i]), data["obs2"][i], nb, nb2)
        return buf


def _ctx_to_json(ctx: NeighborContext | None):
    if ctx is None:
        return None
    return {k: v.tolist() for k, v in asdict(ctx).items()}


def _ctx_from_json(raw) -> NeighborContext | None:
    if raw is None:
        return None
    return NeighborContext(np.asarray(raw["lane_blocks"], dtype=float).reshape(len(raw["directions"]), -1),
                           np.asarray(raw["durations"], dtype=float).reshape(len(raw["directions"]), -1),
                           np.asarray(raw["directions"], dtype=np.int64), np.asarray(raw["distances"], dtype=float))


# ---------------------------------------------------------------- updates

def _finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise DivergenceError(f"{what} became non-finite ({value})")
    return value


def critic_loss(critic: ParamSet, arch: Architecture, batch: Batch, target: np.ndarray, x_masked: np.ndarray) -> Tensor:
    """Mean squared error between the executed phase's estimate and the bootstrap target."""
    q = critic_forward(critic, arch, batch.obs, Tensor(x_masked), batch.nb)
    onehot = np.zeros(q.shape)
    onehot[np.arange(len(batch)), batch.k] = 1.0
    pred = ad.sum_(ad.mul(q, onehot), axis=-1)
    return ad.mean(ad.square(ad.add(pred, -target)))


def actor_objective(actor: ParamSet, arch: Architecture, obs, critic_fn: Callable[[np.ndarray, Tensor], Tensor],
                    neighbors: NeighborBatch | None = None) -> Tensor:
    """Mean over the batch of the summed per-phase estimates at the actor's durations."""
    x = actor_forward(actor, arch, obs, neighbors)
    return ad.mean(ad.sum_(critic_fn(obs, x), axis=-1))


def actor_update(actor: ParamSet, arch: Architecture, obs, critic_fn, optimizer: Adam,
                 neighbors: NeighborBatch | None = None) -> float:
    """One ascent step on the summed estimated reward; only actor parameters move."""
    objective = actor_objective(actor, arch, obs, critic_fn, neighbors)
    value = _finite(float(objective.data), "actor objective")
    optimizer.step(actor.grads(ad.neg(objective)))
    return value


class PHDDPGAgent:
    def __init__(self, arch: Architecture, cfg: AgentConfig = AgentConfig(), seed: int = 0):
        self.arch, self.cfg = arch, cfg
        self.rng = np.random.default_rng(seed)
        init_rng = np.random.default_rng(seed + 7919)
        self.actor = build_actor(arch, init_rng)
        self.critic = build_critic(arch, init_rng)
        self.actor_target = _frozen_copy(self.actor)
        self.critic_target = _frozen_copy(self.critic)
        self.actor_opt = Adam(self.actor, cfg.lr_actor)
        self.critic_opt = Adam(self.critic, cfg.lr_critic)
        self.updates = 0

    # acting
    def act(self, obs: np.ndarray, neighbors: NeighborContext | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Actor durations x* and critic estimates at x*, both length K."""
        nb = self._nb_single(neighbors)
        x = actor_forward(self.actor, self.arch, obs, nb).data
        q = critic_forward(self.critic, self.arch, obs, x, nb).data
        return x[0], q[0]

    def select_action(self, obs: np.ndarray, neighbors: NeighborContext | None = None) -> tuple[int, float, np.ndarray]:
        x, q = self.act(obs, neighbors)
        k = int(np.argmax(q))
        return k, float(x[k]), x

    def _nb_single(self, ctx: NeighborContext | None) -> NeighborBatch | None:
        if not self.arch.neighbors:
            return None
        return NeighborBatch.stack([ctx], self.arch.lane_width, self.arch.K)

    # learning
    def critic_update(self, batch: Batch) -> float:
        cfg, arch = self.cfg, self.arch
        x_next = actor_forward(self.actor_target, arch, batch.obs2, batch.nb2).data
        q_next = critic_forward(self.critic_target, arch, batch.obs2, x_next, batch.nb2).data
        target = batch.r * cfg.reward_scale + cfg.gamma * q_next.max(axis=1)
        stats = batch_stats(batch.k, batch.x, arch.K)
        x_masked = mask_batch(batch.k, batch.x, stats, self.rng, cfg.mask, (arch.x_min, arch.x_max))
        loss = critic_loss(self.critic, arch, batch, target, x_masked)
        value = _finite(float(loss.data), "critic loss")
        self.critic_opt.step(self.critic.grads(loss))
        return value

    def actor_step(self, batch: Batch) -> float:
        critic, arch = self.critic, self.arch

        def critic_fn(obs, x):
            return critic_forward(critic, arch, obs, x, batch.nb)

        return actor_update(self.actor, arch, batch.obs, critic_fn, self.actor_opt, batch.nb)

    def soft_update(self) -> None:
        self.critic_target.soft_update(self.critic, self.cfg.tau)
        self.actor_target.soft_update(self.actor, self.cfg.tau)

    def train_step(self, buffer: ReplayBuffer) -> tuple[float, float | None]:
        """One iteration of the inner loop: critic step, and every ``policy_delay`` steps an actor step plus target blend."""
        batch = buffer.sample(self.cfg.batch_size, self.rng)
        loss = self.critic_update(batch)
        self.updates += 1
        objective = None
        if self.updates % self.cfg.policy_delay == 0:
            objective = self.actor_step(batch)
            self.soft_update()
        return loss, objective

    # persistence
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, ps in (("actor", self.actor), ("critic", self.critic),
                           ("actor_target", self.actor_target), ("critic_target", self.critic_target)):
            out.update({f"{prefix}/{n}": a for n, a in ps.arrays().items()})
        out.update(self.actor_opt.state_arrays("opt_actor"))
        out.update(self.critic_opt.state_arrays("opt_critic"))
        return out

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        info = {"architecture": self.arch.signature(), "agent": asdict(self.cfg), "updates": self.updates,
                "rng_state": self.rng.bit_generator.state}
        info.update(meta or {})
        ad.save_arrays(path, self.state_arrays(), info)

    @classmethod
    def load(cls, path: str | Path) -> tuple["PHDDPGAgent", dict]:
        arrays, meta = ad.load_arrays(path)
        sig = meta["architecture"]
        cfg = AgentConfig(**meta["agent"])
        arch = Architecture(sig["K"], np.asarray(sig["membership"]), sig["n_lanes"], sig["d_model"],
                            sig["head_width"], sig["alpha"], sig["x_min"], sig["x_max"], sig["feature_scale"],
                            sig["neighbors"])
        agent = cls(arch, cfg)
        for prefix, ps in (("actor", agent.actor), ("critic", agent.critic),
                           ("actor_target", agent.actor_target), ("critic_target", agent.critic_target)):
            ps.load_arrays({n: arrays[f"{prefix}/{n}"] for n in ps.names()})
        agent.actor_opt.load_state("opt_actor", arrays)
        agent.critic_opt.load_state("opt_critic", arrays)
        agent.updates = int(meta.get("updates", 0))
        if "rng_state" in meta:
            agent.rng.bit_generator.state = meta["rng_state"]
        return agent, meta


def _frozen_copy(params: ParamSet) -> ParamSet:
    out = params.copy()
    for _, t in out:
        t.requires_grad = False
    return out


def soft_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    target.soft_update(online, tau)
    return target
