import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats as sps

from phddpg import autodiff as ad
from phddpg.agent import (
    AgentConfig, Architecture, BatchStats, DivergenceError, PHDDPGAgent, ReplayBuffer,
    actor_forward, actor_objective, batch_stats, build_actor, build_critic, critic_forward, critic_loss,
    fem_forward, mask, mask_batch, param_embed, state_input,
)
from phddpg.synthetic import random_observations


def _obs(arch, n, seed=0):
    return random_observations(arch, n, np.random.default_rng(seed))


def test_actor_outputs_inside_bounds(arch1):
    obs = _obs(arch1, 10_000)
    obs[::7, :72] *= 50  # include heavy-traffic states far outside the training range
    for seed in range(3):
        x = actor_forward(build_actor(arch1, np.random.default_rng(seed)), arch1, obs).data
        assert x.shape == (10_000, 4)
        assert np.all((x >= 10.0) & (x <= 40.0))


def test_actor_deterministic(arch1):
    p = build_actor(arch1, np.random.default_rng(0))
    obs = _obs(arch1, 8)
    assert np.array_equal(actor_forward(p, arch1, obs).data, actor_forward(p, arch1, obs).data)


def test_critic_shape_and_x_dependence(arch1):
    p = build_critic(arch1, np.random.default_rng(0))
    obs = _obs(arch1, 6)
    x = ad.Tensor(np.random.default_rng(1).uniform(10, 40, (6, 4)), requires_grad=True)
    out = critic_forward(p, arch1, obs, x)
    assert out.shape == (6, 4) and np.all(np.isfinite(out.data))
    J = ad.jacobian(out, x)
    assert np.all(np.abs(np.diagonal(J, axis1=1, axis2=2)) > 0)
    # the attention couples phases, so off-diagonal entries are nonzero too
    assert np.abs(J - np.diagonal(J, axis1=1, axis2=2)[:, None, :] * np.eye(4)).max() > 0


def test_critic_diagonal_jacobian_matches_finite_differences(arch1):
    p = build_critic(arch1, np.random.default_rng(0))
    obs = _obs(arch1, 3, seed=5)
    x0 = np.random.default_rng(2).uniform(10, 40, (3, 4))
    xt = ad.Tensor(x0, requires_grad=True)
    J = ad.jacobian(critic_forward(p, arch1, obs, xt), xt)
    h = 1e-4
    for k in range(4):
        xp, xm = x0.copy(), x0.copy()
        xp[:, k] += h
        xm[:, k] -= h
        fd = (critic_forward(p, arch1, obs, xp).data - critic_forward(p, arch1, obs, xm).data) / (2 * h)
        assert np.allclose(J[:, :, k], fd, rtol=1e-5, atol=1e-10)


def test_param_embed_identity_and_pure_attention(arch1):
    p = build_critic(arch1, np.random.default_rng(0))
    obs = _obs(arch1, 5)
    H = fem_forward(p, arch1, state_input(p, arch1, obs))
    x = np.random.default_rng(3).uniform(10, 40, (5, 4))
    assert np.array_equal(param_embed(p, arch1, H, x, alpha=1.0).data, H.data)
    full = param_embed(p, arch1, H, x, alpha=0.0).data
    half = param_embed(p, arch1, H, x, alpha=0.5).data
    assert np.allclose(half, 0.5 * H.data + 0.5 * full, rtol=0, atol=1e-15)
    with pytest.raises(ad.ShapeError):
        param_embed(p, arch1, H, x[:, :3])


def test_param_embed_couples_rows(arch1):
    p = build_critic(arch1, np.random.default_rng(0))
    obs = _obs(arch1, 1)
    H = fem_forward(p, arch1, state_input(p, arch1, obs))
    x = np.full((1, 4), 25.0)
    base = param_embed(p, arch1, H, x).data
    x2 = x.copy()
    x2[0, 1] += 5.0
    moved = np.abs(param_embed(p, arch1, H, x2).data - base).max(axis=-1)[0]
    assert np.all(moved > 0)


def test_fem_zero_observation_rows_identical(arch1):
    p = build_critic(arch1, np.random.default_rng(0))
    H = fem_forward(p, arch1, state_input(p, arch1, np.zeros((1, arch1.obs_dim)))).data[0]
    assert H.shape == (4, arch1.d_model)
    assert np.allclose(H, H[0], rtol=0, atol=1e-15)


def test_fem_equivariant_under_quarter_turn(arch1):
    # rotating every approach one leg clockwise maps the NS phases onto the EW phases
    lane_perm = np.array([((i // 3 + 1) % 4) * 3 + i % 3 for i in range(12)])  # old lane i -> new slot
    M = arch1.membership
    rotated = np.zeros_like(M)
    rotated[:, lane_perm] = M
    phase_perm = np.array([next(j for j in range(4) if np.array_equal(M[j], rotated[k])) for k in range(4)])
    assert sorted(phase_perm) == [0, 1, 2, 3]
    p = build_critic(arch1, np.random.default_rng(0))
    obs = _obs(arch1, 4, seed=9)
    obs2 = obs.copy()
    block = obs[:, :72].reshape(4, 12, 6)
    new_block = np.zeros_like(block)
    new_block[:, lane_perm] = block
    obs2[:, :72] = new_block.reshape(4, 72)
    obs2[:, 72 + phase_perm] = obs[:, 72:76]
    H = fem_forward(p, arch1, state_input(p, arch1, obs)).data
    H2 = fem_forward(p, arch1, state_input(p, arch1, obs2)).data
    assert np.allclose(H2[:, phase_perm], H, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- mask

@given(st.integers(0, 3), st.floats(10.0, 40.0), st.sampled_from(["gaussian", "mean", "zero", "none"]),
       st.integers(0, 2**31))
def test_mask_keeps_executed_component(k, x, strategy, seed):
    st_ = BatchStats(np.array([12.0, 20.0, 30.0, 38.0]), np.array([4.0, 9.0, 1.0, 16.0]))
    out = mask(k, x, st_, np.random.default_rng(seed), strategy)
    assert out[k] == x
    if strategy != "zero":
        assert np.all((out >= 10.0) & (out <= 40.0))


def test_mask_degenerate_variance_gives_means():
    st_ = BatchStats(np.array([12.0, 20.0, 30.0, 38.0]), np.zeros(4))
    out = mask(1, 33.0, st_, np.random.default_rng(0))
    assert np.array_equal(out, [12.0, 33.0, 30.0, 38.0])


def test_mask_strategies():
    st_ = BatchStats(np.array([12.0, 20.0, 30.0, 38.0]), np.ones(4))
    rng = np.random.default_rng(0)
    assert np.array_equal(mask(2, 17.0, st_, rng, "mean"), [12.0, 20.0, 17.0, 38.0])
    assert np.array_equal(mask(2, 17.0, st_, rng, "zero"), [0.0, 0.0, 17.0, 0.0])
    assert np.array_equal(mask(2, 17.0, st_, rng, "none"), [17.0] * 4)
    with pytest.raises(ValueError):
        mask(0, 20.0, st_, rng, "bogus")


def test_mask_moments_pre_clamp():
    mu, var = np.array([15.0, 25.0, 22.0, 30.0]), np.array([4.0, 9.0, 2.25, 1.0])
    n = 100_000
    out = mask_batch(np.zeros(n, dtype=int), np.full(n, 11.0), BatchStats(mu, var),
                     np.random.default_rng(0), clamp=False)
    assert np.all(out[:, 0] == 11.0)
    for j in (1, 2, 3):
        col = out[:, j]
        assert abs(col.mean() - mu[j]) < 3 * np.sqrt(var[j] / n)
        se_var = var[j] * np.sqrt(2.0 / (n - 1))
        assert abs(col.var(ddof=1) - var[j]) < 3 * se_var


def test_batch_stats_fallback():
    k = np.array([0, 0, 0, 1, 2, 2])
    x = np.array([10.0, 20.0, 30.0, 40.0, 15.0, 25.0])
    s = batch_stats(k, x, 4)
    assert s.mean[0] == 20.0 and np.isclose(s.var[0], 200 / 3)
    assert s.mean[2] == 20.0 and s.var[2] == 25.0
    # phases with fewer than two samples use the batch-wide moments
    for j in (1, 3):
        assert s.mean[j] == x.mean() and s.var[j] == x.var()


# ---------------------------------------------------------------- updates

def _buffer(arch, n, seed=0, k=None):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(10_000, arch.obs_dim)
    obs, obs2 = random_observations(arch, n, rng), random_observations(arch, n, rng)
    for i in range(n):
        kk = int(rng.integers(arch.K)) if k is None else k
        buf.push(obs[i], kk, float(rng.uniform(10, 40)), -float(rng.integers(0, 30)), obs2[i])
    return buf


def test_critic_overfits_zero_target(arch1):
    # at lr 1e-3 Adam momentum overshoots near zero loss; a smaller step gives a monotone descent
    cfg = AgentConfig(gamma=0.0, mask="mean", batch_size=32, lr_critic=3e-4)
    agent = PHDDPGAgent(arch1, cfg, seed=0)
    batch = _buffer(arch1, 32).contents()
    batch.r[:] = 0.0
    losses = [agent.critic_update(batch) for _ in range(100)]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.05 * losses[0]


def test_critic_loss_supervises_only_executed_component(arch1):
    p = build_critic(arch1, np.random.default_rng(0))
    batch = _buffer(arch1, 16, k=2).contents()
    x = np.random.default_rng(1).uniform(10, 40, (16, 4))
    g = p.grads(critic_loss(p, arch1, batch, np.zeros(16), x))
    assert np.all(g["head.out.W"][[0, 1, 3]] == 0) and np.all(g["head.out.b"][[0, 1, 3]] == 0)
    assert np.abs(g["head.out.W"][2]).max() > 0 and g["head.out.b"][2] != 0


def test_critic_update_target_uses_frozen_networks(arch1):
    agent = PHDDPGAgent(arch1, AgentConfig(), seed=0)
    before = {n: t.data.copy() for n, t in agent.critic_target}
    actor_before = {n: t.data.copy() for n, t in agent.actor}
    agent.critic_update(_buffer(arch1, 80).contents())
    assert all(np.array_equal(before[n], t.data) for n, t in agent.critic_target)
    assert all(np.array_equal(actor_before[n], t.data) for n, t in agent.actor)


def test_actor_objective_gradient_matches_finite_differences(arch1):
    actor = build_actor(arch1, np.random.default_rng(0))
    critic = build_critic(arch1, np.random.default_rng(1))
    obs = _obs(arch1, 4)
    fn = lambda o, x: critic_forward(critic, arch1, o, x)
    assert ad.gradient_check(lambda: actor_objective(actor, arch1, obs, fn), actor, numeric_dtype=np.longdouble) < 1e-4


def test_actor_objective_permutation_invariant(arch1):
    actor = build_actor(arch1, np.random.default_rng(0))
    critic = build_critic(arch1, np.random.default_rng(1))
    obs = _obs(arch1, 12)
    perm = np.random.default_rng(2).permutation(12)
    fn = lambda o, x: critic_forward(critic, arch1, o, x)
    a = float(actor_objective(actor, arch1, obs, fn).data)
    b = float(actor_objective(actor, arch1, obs[perm], fn).data)
    assert np.isclose(a, b, rtol=1e-14, atol=0)


def test_actor_step_leaves_critic_untouched(arch1):
    agent = PHDDPGAgent(arch1, AgentConfig(), seed=0)
    before = {n: t.data.copy() for n, t in agent.critic}
    agent.actor_step(_buffer(arch1, 80).contents())
    assert all(np.array_equal(before[n], t.data) for n, t in agent.critic)


def test_divergence_raises(arch1):
    agent = PHDDPGAgent(arch1, AgentConfig(), seed=0)
    batch = _buffer(arch1, 8).contents()
    batch.r[0] = np.inf
    with pytest.raises(DivergenceError):
        agent.critic_update(batch)


def test_select_action_tie_breaks_low(arch1, monkeypatch):
    agent = PHDDPGAgent(arch1, AgentConfig(), seed=0)
    x = np.array([11.0, 22.0, 33.0, 44.0])
    monkeypatch.setattr(agent, "act", lambda obs, nb=None: (x, np.array([-3.0, -1.0, -7.0, -1.0])))
    assert agent.select_action(np.zeros(77)) == (1, 22.0, x)


def test_select_action_duration_in_bounds(arch1):
    agent = PHDDPGAgent(arch1, AgentConfig(), seed=3)
    for obs in _obs(arch1, 50):
        k, x, vec = agent.select_action(obs)
        assert 0 <= k < 4 and 10.0 <= x <= 40.0 and x == vec[k]


def test_select_action_matches_grid_search(arch1, monkeypatch):
    # separable critic Q_j = a_j(s) - (x_j - c_j)^2 with state-dependent a; after fitting the actor,
    # argmax over Q at the actor's durations must equal exhaustive search on a 0.1 s grid
    c = np.array([14.0, 31.0, 22.0, 37.0])
    W = np.random.default_rng(5).normal(size=(72, 4)) * 0.05

    def a_of(obs):
        return np.asarray(obs)[..., :72] @ W

    def critic_fn(obs, x):
        d = ad.add(x, -c)
        return ad.add(ad.neg(ad.mul(d, d)), a_of(obs))

    agent = PHDDPGAgent(arch1, AgentConfig(lr_actor=1e-2), seed=0)
    obs = _obs(arch1, 64, seed=1)
    for _ in range(600):
        from phddpg.agent import actor_update
        actor_update(agent.actor, arch1, obs, critic_fn, agent.actor_opt)

    def fake_act(o, nb=None):
        x = actor_forward(agent.actor, arch1, o).data[0]
        return x, critic_fn(np.atleast_2d(o), ad.Tensor(x[None])).data[0]

    monkeypatch.setattr(agent, "act", fake_act)
    grid = np.round(np.arange(10.0, 40.0 + 1e-9, 0.1), 1)
    for o in obs[:16]:
        k, x, _ = agent.select_action(o)
        a = a_of(o)
        table = a[:, None] - (grid[None, :] - c[:, None]) ** 2
        kk, ii = np.unravel_index(np.argmax(table), table.shape)
        assert k == kk and abs(x - grid[ii]) <= 0.1 + 0.05


# ---------------------------------------------------------------- replay

def test_replay_fifo_eviction():
    buf = ReplayBuffer(5, 2)
    for i in range(7):
        buf.push(np.full(2, i), i % 3, 10.0 + i, -i, np.full(2, i + 1))
    assert len(buf) == 5
    assert list(buf.contents().obs[:, 0]) == [2, 3, 4, 5, 6]


def test_replay_full_sample_is_permutation():
    buf = ReplayBuffer(100, 1)
    for i in range(40):
        buf.push([i], 0, 10.0, 0.0, [i])
    s = buf.sample(40, np.random.default_rng(0))
    assert sorted(s.obs[:, 0]) == list(range(40))
    with pytest.raises(ValueError):
        buf.sample(41, 0)


def test_replay_sampling_deterministic():
    buf = ReplayBuffer(100, 1)
    for i in range(50):
        buf.push([i], 0, 10.0, 0.0, [i])
    assert np.array_equal(buf.sample(10, 7).obs, buf.sample(10, 7).obs)


def test_replay_sampling_uniform_chi_square():
    buf = ReplayBuffer(100, 1)
    size = 50
    for i in range(size):
        buf.push([i], 0, 10.0, 0.0, [i])
    rng = np.random.default_rng(0)
    counts = np.zeros(size)
    for _ in range(10_000):
        counts += np.bincount(buf.sample(10, rng).obs[:, 0].astype(int), minlength=size)
    assert counts.sum() == 100_000
    _, p = sps.chisquare(counts)
    assert p > 0.001


def test_replay_save_load(tmp_path, arch1):
    buf = _buffer(arch1, 30)
    buf.save(tmp_path / "b.npz")
    back = ReplayBuffer.load(tmp_path / "b.npz")
    a, b = buf.contents(), back.contents()
    for f in ("obs", "k", "x", "r", "obs2"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_replay_capacity_growth():
    buf = ReplayBuffer(3000, 1)
    for i in range(2500):
        buf.push([i], 0, 10.0, 0.0, [i])
    assert len(buf) == 2500 and buf.contents().obs[-1, 0] == 2499


# ---------------------------------------------------------------- agent lifecycle

def test_training_deterministic(arch1):
    buf = _buffer(arch1, 200)
    runs = []
    for _ in range(2):
        agent = PHDDPGAgent(arch1, AgentConfig(), seed=11)
        for _ in range(6):
            agent.train_step(buf)
        runs.append(agent.state_arrays())
    assert runs[0].keys() == runs[1].keys()
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_policy_delay_and_soft_update(arch1):
    agent = PHDDPGAgent(arch1, AgentConfig(policy_delay=2), seed=0)
    buf = _buffer(arch1, 200)
    tgt0 = agent.actor_target["head.out.b"].data.copy()
    _, obj = agent.train_step(buf)
    assert obj is None and np.array_equal(agent.actor_target["head.out.b"].data, tgt0)
    _, obj = agent.train_step(buf)
    assert obj is not None and not np.array_equal(agent.actor_target["head.out.b"].data, tgt0)


def test_checkpoint_roundtrip(tmp_path, arch1):
    buf = _buffer(arch1, 200)
    agent = PHDDPGAgent(arch1, AgentConfig(), seed=4)
    for _ in range(3):
        agent.train_step(buf)
    agent.save(tmp_path / "a.ckpt", {"episode": 3})
    back, meta = PHDDPGAgent.load(tmp_path / "a.ckpt")
    assert meta["episode"] == 3 and back.updates == 3
    obs = _obs(arch1, 1)[0]
    assert np.array_equal(agent.act(obs)[0], back.act(obs)[0])
    # training resumes identically, including optimiser moments and sampling state
    for _ in range(3):
        agent.train_step(buf)
        back.train_step(buf)
    a, b = agent.state_arrays(), back.state_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_parameter_counts(arch1):
    assert build_actor(arch1, np.random.default_rng(0)).count == 5668
    assert build_critic(arch1, np.random.default_rng(0)).count == 8900
