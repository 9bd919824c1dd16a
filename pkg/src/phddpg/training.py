"""Experiment drivers: data collection, offline and online training, evaluation, diagnostics."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agent import Architecture, DivergenceError, PHDDPGAgent, ReplayBuffer, critic_forward, actor_forward
from .config import Config, ConfigError
from .controllers import agent_controller, fixed_time_controller, max_pressure_controller, random_collection_policy
from .metrics import Contribution, att, contribution_matrix, summarize
from .scenario import Scenario, generate_grid, load_scenario
from .sim import EpisodeLog, run_episode, transitions

logger = logging.getLogger(__name__)

DIAG_SAMPLES = 64


def scenario_from_config(cfg: Config) -> Scenario:
    s = cfg.scenario
    if s.roadnet or s.flow:
        if not (s.roadnet and s.flow):
            raise ConfigError("scenario.roadnet and scenario.flow must be given together")
        return load_scenario(s.roadnet, s.flow)
    return generate_grid(s.rows, s.cols, s.link_length, s.demand, s.seed, cfg.train.horizon, s.ns_share, s.phase_scheme)


def effective_agent_config(cfg: Config):
    a = cfg.agent
    if cfg.variant.name == "nb" and not a.neighbors:
        a = dataclasses.replace(a, neighbors=True)
    return a


def make_agent(scenario: Scenario, cfg: Config, seed: int | None = None) -> PHDDPGAgent:
    """One agent shared by every signalised intersection; they must share a layout."""
    acfg = effective_agent_config(cfg)
    net = scenario.network
    ids = net.signalized
    if not ids:
        raise ConfigError("scenario has no signalised intersection")
    arch = Architecture.from_network(net, ids[0], acfg)
    for other in ids[1:]:
        o = Architecture.from_network(net, other, acfg)
        if o.K != arch.K or not np.array_equal(o.membership, arch.membership):
            raise ConfigError(f"intersection {other!r} has a different phase layout; a shared policy needs one layout")
    return PHDDPGAgent(arch, acfg, cfg.train.seed if seed is None else seed)


def _episode(scenario: Scenario, controller, cfg: Config, seed: int = 0) -> EpisodeLog:
    return run_episode(scenario.network, scenario.flow, controller, cfg.train.horizon, cfg.sim, seed,
                       neighbor_contexts=effective_agent_config(cfg).neighbors)


def push_log(buffer: ReplayBuffer, log: EpisodeLog) -> int:
    n = 0
    for rec, nxt in transitions(log):
        buffer.push(rec.observation, rec.k, rec.x, rec.reward, nxt.observation, rec.neighbors, nxt.neighbors)
        n += 1
    return n


def collect(scenario: Scenario, cfg: Config, episodes: int | None = None, seed: int | None = None,
            buffer: ReplayBuffer | None = None) -> ReplayBuffer:
    """Fill a replay buffer with episodes driven by the uniform random policy."""
    episodes = cfg.train.collect_episodes if episodes is None else episodes
    seed = cfg.train.seed if seed is None else seed
    net = scenario.network
    obs_dim = Architecture.from_network(net, net.signalized[0], effective_agent_config(cfg)).obs_dim
    buffer = buffer if buffer is not None else ReplayBuffer(cfg.agent.buffer_capacity, obs_dim)
    for e in range(episodes):
        policy = random_collection_policy(seed * 100_003 + e, cfg.agent.x_min, cfg.agent.x_max)
        n = push_log(buffer, _episode(scenario, policy, cfg, seed=e))
        logger.debug("collect episode %d: %d transitions", e, n)
    logger.info("collected %d transitions over %d episodes", len(buffer), episodes)
    return buffer


def evaluate_controller(scenario: Scenario, make_controller: Callable[[], Callable], cfg: Config,
                        seeds: Sequence[int] | None = None) -> list[dict]:
    """One frozen-policy episode per seed; a generated scenario gets its demand resampled per seed."""
    rows = []
    for s in (cfg.train.eval_seed_list() if seeds is None else seeds):
        sc = scenario.with_seed(int(s)) if scenario.generator and int(s) != scenario.generator.get("seed") else scenario
        log = _episode(sc, make_controller(), cfg, seed=int(s))
        rows.append({"seed": int(s), **summarize(log)})
    return rows


def evaluate_agent(agent: PHDDPGAgent, scenario: Scenario, cfg: Config, seeds: Sequence[int] | None = None,
                   variant: str | None = None) -> list[dict]:
    variant = cfg.variant.name if variant is None else variant
    return evaluate_controller(scenario, lambda: agent_controller(agent, variant), cfg, seeds)


def aggregate(rows: Sequence[dict]) -> dict:
    out = {}
    for key in ("att", "datt", "dar"):
        vals = np.array([r[key] for r in rows], dtype=float)
        out[f"{key}_mean"] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
        out[f"{key}_std"] = float(np.nanstd(vals)) if np.isfinite(vals).any() else float("nan")
    out["episodes"] = len(rows)
    out["empty"] = all(r.get("empty", False) for r in rows)
    return out


def diagnose(agent: PHDDPGAgent, states: np.ndarray, neighbors=None) -> Contribution:
    """Contribution matrix of the online critic at the actor's proposals for ``states``."""
    arch = agent.arch
    x = actor_forward(agent.actor, arch, states, neighbors).data

    def critic_fn(obs, xt):
        return critic_forward(agent.critic, arch, obs, xt, neighbors)

    return contribution_matrix(critic_fn, states, x)


def diagnostic_states(buffer: ReplayBuffer, n: int = DIAG_SAMPLES, seed: int = 12345):
    batch = buffer.sample(min(n, len(buffer)), np.random.default_rng(seed))
    return batch.obs, batch.nb


@dataclass
class TrainResult:
    agent: PHDDPGAgent
    rows: list[dict] = field(default_factory=list)
    best_episode: int = -1
    best_att: float = float("inf")
    best_state: dict | None = None
    interactions: int = 0
    final: dict = field(default_factory=dict)
    checkpoints: list[str] = field(default_factory=list)
    elapsed: float = 0.0

    def best_agent(self) -> PHDDPGAgent:
        if self.best_state is None:
            return self.agent
        agent = PHDDPGAgent(self.agent.arch, self.agent.cfg)
        for prefix, ps in (("actor", agent.actor), ("critic", agent.critic),
                           ("actor_target", agent.actor_target), ("critic_target", agent.critic_target)):
            ps.load_arrays({n: self.best_state[f"{prefix}/{n}"] for n in ps.names()})
        return agent


def _checkpoint(agent: PHDDPGAgent, out_dir: Path | None, name: str, cfg: Config, extra: dict) -> str | None:
    if out_dir is None:
        return None
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    agent.save(path, {"config_hash": cfg.hash(), "config": cfg.to_dict(), **extra})
    return str(path)


def _train_steps(agent: PHDDPGAgent, buffer: ReplayBuffer, steps: int, cfg: Config, out_dir: Path | None,
                 episode: int) -> tuple[float, float]:
    losses, objectives = [], []
    try:
        for _ in range(steps):
            loss, obj = agent.train_step(buffer)
            losses.append(loss)
            if obj is not None:
                objectives.append(obj)
    except DivergenceError:
        _checkpoint(agent, out_dir, "diverged.ckpt", cfg, {"episode": episode})
        raise
    return (float(np.mean(losses)) if losses else float("nan"),
            float(np.mean(objectives)) if objectives else float("nan"))


def train_offline(scenario: Scenario, cfg: Config, buffer: ReplayBuffer | None = None, out_dir: str | Path | None = None,
                  eval_seeds: Sequence[int] | None = None, diag_every: int = 1,
                  on_episode: Callable[[int, PHDDPGAgent, dict], None] | None = None) -> TrainResult:
    """Gradient-only training on a fixed buffer; every episode's weights are evaluated in simulation."""
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if buffer is None:
        buffer = collect(scenario, cfg)
    if len(buffer) < cfg.agent.batch_size:
        raise ConfigError(f"buffer holds {len(buffer)} transitions, fewer than batch size {cfg.agent.batch_size}")
    agent = make_agent(scenario, cfg)
    result = TrainResult(agent)
    diag_obs, diag_nb = diagnostic_states(buffer)
    for ep in range(cfg.train.train_episodes):
        loss, objective = _train_steps(agent, buffer, cfg.train.steps_per_episode, cfg, out, ep)
        ckpt = _checkpoint(agent, out, f"episode_{ep + 1:03d}.ckpt", cfg, {"episode": ep + 1})
        if ckpt:
            result.checkpoints.append(ckpt)
        evals = evaluate_agent(agent, scenario, cfg, eval_seeds)
        agg = aggregate(evals)
        row = {"episode": ep + 1, "seed": cfg.train.seed, "att": agg["att_mean"], "datt": agg["datt_mean"],
               "dar": agg["dar_mean"], "loss": loss, "objective": objective}
        if diag_every and (ep + 1) % diag_every == 0:
            row["mean_diag"] = diagnose(agent, diag_obs, diag_nb).mean_diagonal
        result.rows.append(row)
        if row["att"] < result.best_att:
            result.best_att, result.best_episode = row["att"], ep + 1
            result.best_state = {k: v.copy() for k, v in agent.state_arrays().items()}
        logger.info("offline episode %d: att %.2f loss %.4f", ep + 1, row["att"], loss)
        if on_episode is not None:
            on_episode(ep + 1, agent, row)
    result.final = {"best_att": result.best_att, "best_episode": result.best_episode}
    result.elapsed = time.perf_counter() - t0
    return result


def train_online(scenario: Scenario, cfg: Config, out_dir: str | Path | None = None,
                 on_episode: Callable[[int, PHDDPGAgent, dict], None] | None = None) -> TrainResult:
    """Alternate blocks of gradient steps with one exploratory interaction episode.

    The buffer is seeded with ``warmup_episodes`` random-policy episodes so the
    first batch can be drawn. Reported metrics average the last ``report_last``
    interaction episodes.
    """
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    t = cfg.train
    buffer = collect(scenario, cfg, episodes=t.warmup_episodes, seed=t.seed + 1)
    agent = make_agent(scenario, cfg)
    result = TrainResult(agent, interactions=t.warmup_episodes)
    rng = np.random.default_rng(t.seed + 17)
    for ep in range(t.online_episodes):
        loss, objective = _train_steps(agent, buffer, t.steps_per_episode, cfg, out, ep)
        ctrl = agent_controller(agent, cfg.variant.name, cfg.agent.explore_sigma, rng)
        log = _episode(scenario, ctrl, cfg, seed=ep)
        result.interactions += 1
        push_log(buffer, log)
        s = summarize(log)
        row = {"episode": ep + 1, "seed": t.seed, "att": s["att"], "datt": s["datt"], "dar": s["dar"],
               "loss": loss, "objective": objective}
        result.rows.append(row)
        if row["att"] < result.best_att:
            result.best_att, result.best_episode = row["att"], ep + 1
            result.best_state = {k: v.copy() for k, v in agent.state_arrays().items()}
        logger.info("online episode %d: att %.2f loss %.4f", ep + 1, row["att"], loss)
        if on_episode is not None:
            on_episode(ep + 1, agent, row)
    last = result.rows[-t.report_last:] if result.rows else []
    result.final = {key: float(np.nanmean([r[key] for r in last])) if last else float("nan")
                    for key in ("att", "datt", "dar")}
    result.final.update(best_att=result.best_att, best_episode=result.best_episode)
    path = _checkpoint(agent, out, "final.ckpt", cfg, {"episode": t.online_episodes})
    if path:
        result.checkpoints.append(path)
    result.elapsed = time.perf_counter() - t0
    return result


def baseline_factory(name: str, cfg: Config) -> Callable[[], Callable]:
    key = name.lower().replace("-", "_")
    b = cfg.baselines
    if key in ("fixedtime", "fixed_time", "fixed"):
        return lambda: fixed_time_controller(b.fixed_time_duration)
    if key in ("maxpressure", "max_pressure", "mp"):
        return lambda: max_pressure_controller(b.max_pressure_duration)
    if key == "random":
        return lambda: random_collection_policy(cfg.train.seed, cfg.agent.x_min, cfg.agent.x_max)
    raise ConfigError(f"unknown baseline {name!r}; expected fixedtime, maxpressure or random")


def compare(scenario: Scenario, cfg: Config, entries: Sequence[str], seeds: Sequence[int] | None = None) -> dict[str, dict]:
    """Aggregate metrics for each entry; an entry is a baseline name or a checkpoint path."""
    table = {}
    for entry in entries:
        if Path(entry).is_file():
            agent, _ = PHDDPGAgent.load(entry)
            rows = evaluate_agent(agent, scenario, cfg, seeds)
        else:
            rows = evaluate_controller(scenario, baseline_factory(entry, cfg), cfg, seeds)
        table[entry] = aggregate(rows)
    return table

