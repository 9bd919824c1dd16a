import numpy as np
from hypothesis import given, strategies as st

from phddpg import autodiff as ad
from phddpg.agent import AgentConfig, Architecture, PHDDPGAgent, build_critic, critic_forward, state_input
from phddpg.controllers import fixed_time_controller
from phddpg.neighbor import (
    EMBED_WIDTH, NeighborBatch, NeighborContext, augment_state, build_params, gather_contexts, neighbor_embedding,
)
from phddpg.sim import run_episode

LANES, K = 72, 4


def _params(seed=0):
    p = ad.ParamSet(np.random.default_rng(seed))
    build_params(p, "nb", LANES, K)
    return p


def _context(n, rng):
    return NeighborContext(rng.poisson(3.0, (n, LANES)).astype(float), rng.uniform(10, 40, (n, K)),
                           rng.integers(0, 4, n), rng.choice([300.0, 600.0], n))


@given(st.integers(1, 4), st.integers(0, 10_000))
def test_embedding_range_and_width(n, seed):
    rng = np.random.default_rng(seed)
    e = neighbor_embedding(_params(), "nb", NeighborBatch.stack([_context(n, rng)], LANES, K)).data
    assert e.shape == (1, EMBED_WIDTH)
    assert np.all((e > 0) & (e < 1))


@given(st.integers(2, 4), st.integers(0, 10_000))
def test_permutation_invariance(n, seed):
    rng = np.random.default_rng(seed)
    ctx = _context(n, rng)
    perm = rng.permutation(n)
    shuffled = NeighborContext(ctx.lane_blocks[perm], ctx.durations[perm], ctx.directions[perm], ctx.distances[perm])
    p = _params()
    a = neighbor_embedding(p, "nb", NeighborBatch.stack([ctx], LANES, K)).data
    b = neighbor_embedding(p, "nb", NeighborBatch.stack([shuffled], LANES, K)).data
    assert np.allclose(a, b, rtol=0, atol=1e-14)


def test_single_neighbor_is_its_own_value_row():
    rng = np.random.default_rng(0)
    ctx = _context(1, rng)
    p = _params()
    batch = NeighborBatch.stack([ctx], LANES, K)
    gamma = np.concatenate([
        ctx.lane_blocks * 0.1, (ctx.durations - 10.0) / 30.0, p["nb.direction"].data[ctx.directions],
        (ctx.distances / 1000.0)[:, None] @ p["nb.distance.W"].data + p["nb.distance.b"].data,
    ], axis=-1)
    v = gamma @ p["nb.v.W"].data + p["nb.v.b"].data
    expected = 1.0 / (1.0 + np.exp(-v))
    assert np.allclose(neighbor_embedding(p, "nb", batch).data, expected, rtol=0, atol=1e-14)


def test_no_neighbors_gives_zero_and_padding_is_ignored():
    rng = np.random.default_rng(1)
    ctx = _context(2, rng)
    p = _params()
    e = neighbor_embedding(p, "nb", NeighborBatch.stack([None, ctx], LANES, K)).data
    assert np.array_equal(e[0], np.zeros(EMBED_WIDTH))
    alone = neighbor_embedding(p, "nb", NeighborBatch.stack([ctx], LANES, K)).data
    assert np.allclose(e[1], alone[0], rtol=0, atol=1e-15)


def test_augmented_length(net1):
    obs = np.zeros(77)
    assert augment_state(obs, np.zeros(EMBED_WIDTH)).shape == (93,)
    arch = Architecture.from_network(net1, "i0_0", AgentConfig(neighbors=True))
    p = build_critic(arch, np.random.default_rng(0))
    s = state_input(p, arch, obs[None])
    assert s.shape == (1, 93) and np.array_equal(s.data[0, 77:], np.zeros(EMBED_WIDTH))


def test_gradients_reach_neighbor_parameters(grid2):
    net = grid2.network
    arch = Architecture.from_network(net, "i0_0", AgentConfig(neighbors=True))
    p = build_critic(arch, np.random.default_rng(0))
    rng = np.random.default_rng(2)
    batch = NeighborBatch.stack([_context(2, rng), _context(2, rng)], LANES, K)
    obs = np.abs(rng.normal(0, 2, (2, 77)))
    out = critic_forward(p, arch, obs, rng.uniform(10, 40, (2, 4)), batch)
    g = p.grads(ad.sum_(out))
    for name in ("nb.q.W", "nb.k.W", "nb.v.W", "nb.direction", "nb.distance.W"):
        assert np.abs(g[name]).max() > 0, name


def test_gather_contexts_on_grid(grid2):
    net = grid2.network
    seen = {}

    def ctrl(dp):
        seen.setdefault(dp.intersection, gather_contexts(dp.state, dp.intersection, {}))
        return fixed_time_controller()(dp)

    run_episode(net, grid2.flow, ctrl, horizon=60)
    assert set(seen) == set(net.signalized)
    for inter, ctx in seen.items():
        assert len(ctx) == len(net.neighbor_map[inter]) == 2
        assert np.all(ctx.distances == 300.0)
        assert np.all(ctx.durations == 25.0)  # no commanded vector yet: midpoint of the bounds


def test_nb_agent_acts_on_grid(grid2):
    arch = Architecture.from_network(grid2.network, "i0_0", AgentConfig(neighbors=True))
    agent = PHDDPGAgent(arch, AgentConfig(neighbors=True), seed=0)
    log = run_episode(grid2.network, grid2.flow,
                      lambda dp: agent.select_action(dp.observation, dp.neighbors), horizon=120,
                      neighbor_contexts=True)
    assert log.decisions and all(r.neighbors is not None for r in log.decisions)
