import numpy as np
import pytest
from scipy.stats import spearmanr

from marsrl.agent import (AgentConfig, AgentNets, Batch, ReplayBuffer, RiskProfile,
                          SafetyCriticAgent, Transition, make_batch, profile_grid, profile_groups)
from marsrl.errors import BufferUnderfilled, EmptyBatch, LabelOutOfRange, NonFiniteState
from marsrl.nn import MLP, forward

from oracles import central_diff, rel_err
from toys import converged_risks

TOY = AgentConfig(hidden_sizes=(2,), batch_size=4, buffer_capacity=100, actor_final_bound=1.0)


def _agent(seed=0, s_dim=3, a_dim=1, config=TOY, profile=RiskProfile(0.5, 1.0)):
    r = np.random.default_rng(seed)
    return SafetyCriticAgent.create(s_dim, a_dim, profile, config, r,
                                    np.random.default_rng(seed + 1), np.random.default_rng(seed + 2))


def _batch(r, b=6, s_dim=3, a_dim=1, done=None, risk=None):
    return Batch(r.normal(size=(b, s_dim)), r.uniform(-1, 1, size=(b, a_dim)), r.normal(size=b),
                 r.normal(size=(b, s_dim)),
                 np.zeros(b) if done is None else done,
                 r.uniform(0, 1, size=b) if risk is None else risk,
                 r.uniform(-1, 1, size=(b, a_dim)))


# profiles ------------------------------------------------------------------------

def test_profile_grid_shape_and_order():
    g = profile_grid(10)
    assert g[0].theta == pytest.approx(0.15) and g[-1].theta == pytest.approx(0.85)
    assert g[0].lam == pytest.approx(8.0) and g[-1].lam == pytest.approx(0.25)
    assert g[0].label == "Ultra Conservative" and g[-1].label == "Maximum Growth"
    assert all(a.theta < b.theta and a.lam > b.lam for a, b in zip(g, g[1:]))
    assert [len(x) for x in profile_groups(10)] == [4, 3, 3]
    assert len(profile_grid(1)) == 1
    with pytest.raises(ValueError):
        RiskProfile(1.5, 1.0)


# replay ---------------------------------------------------------------------------

def _tr(i, d=1):
    return Transition(np.full(2, float(i)), np.zeros(d), float(i), np.zeros(2), False, 0.0)


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(5, np.random.default_rng(0))
    for i in range(6):
        buf.push(_tr(i))
    assert len(buf) == 5
    assert [t.reward for t in buf.transitions()] == [1.0, 2.0, 3.0, 4.0, 5.0]


def test_buffer_sampling_seeded_and_without_replacement():
    a = ReplayBuffer(50, np.random.default_rng(3))
    b = ReplayBuffer(50, np.random.default_rng(3))
    for i in range(20):
        a.push(_tr(i))
        b.push(_tr(i))
    ia, ib = a.sample_indices(10), b.sample_indices(10)
    np.testing.assert_array_equal(ia, ib)
    assert len(set(ia.tolist())) == 10
    with pytest.raises(BufferUnderfilled):
        a.sample(21)


def test_buffer_sampling_is_uniform():
    buf = ReplayBuffer(10, np.random.default_rng(11))
    for i in range(10):
        buf.push(_tr(i))
    counts = np.zeros(10)
    for _ in range(50_000):                       # 10^5 draws in batches of two
        counts[buf.sample_indices(2)] += 1
    n, p = 50_000, 2 / 10
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)


def test_make_batch_empty():
    with pytest.raises(EmptyBatch):
        make_batch([])


# acting -------------------------------------------------------------------------------

def test_act_deterministic_and_bounded():
    ag = _agent(config=AgentConfig(hidden_sizes=(8, 8)), s_dim=5, a_dim=3)
    s = np.random.default_rng(0).normal(size=5)
    np.testing.assert_array_equal(ag.act(s), ag.act(s))
    states = np.random.default_rng(1).normal(scale=10, size=(10_000, 5))
    assert np.all(np.abs(ag.nets.actor(states)) <= 1.0)
    noisy = [ag.act(x, 0.5) for x in states[:200]]
    assert np.all(np.abs(noisy) <= 1.0)
    with pytest.raises(NonFiniteState):
        ag.act(np.full(5, np.nan))


def test_noisy_actions_repeat_with_seed():
    seqs = []
    for _ in range(2):
        ag = _agent(seed=4, config=AgentConfig(hidden_sizes=(8,)), s_dim=4, a_dim=2)
        s = np.ones(4)
        seqs.append(np.array([ag.act(s, 0.1) for _ in range(20)]))
    np.testing.assert_array_equal(seqs[0], seqs[1])


def test_noise_schedule_monotone():
    cfg = AgentConfig()
    scales = [cfg.noise_scale(e) for e in range(1000)]
    assert scales[0] == 0.2 and scales[-1] == 0.02
    assert all(a >= b for a, b in zip(scales, scales[1:]))


# critic ---------------------------------------------------------------------------

def test_td_target_gamma_zero_and_terminal():
    r = np.random.default_rng(0)
    ag = _agent(config=AgentConfig(hidden_sizes=(4,), gamma=0.0))
    b = _batch(r)
    np.testing.assert_array_equal(ag.td_targets(b), b.rewards)
    ag2 = _agent(config=AgentConfig(hidden_sizes=(4,), gamma=0.99))
    b2 = _batch(r, done=np.ones(6))
    b2.rewards[:] = 1.0
    np.testing.assert_array_equal(ag2.td_targets(b2), np.ones(6))


def test_critic_gradient_matches_fd():
    r = np.random.default_rng(2)
    ag = _agent(seed=2)
    b = _batch(r)
    loss, grads = ag.critic_loss_and_grads(b)
    fd = central_diff(lambda: ag.critic_loss_and_grads(b)[0], ag.nets.critic.params())
    for g, n in zip(grads, fd):
        assert rel_err(g, n) < 1e-4


def test_safety_gradient_matches_fd():
    r = np.random.default_rng(3)
    ag = _agent(seed=3)
    b = _batch(r)
    _, grads = ag.safety_loss_and_grads(b)
    fd = central_diff(lambda: ag.safety_loss_and_grads(b)[0], ag.nets.safety.params())
    for g, n in zip(grads, fd):
        assert rel_err(g, n) < 1e-4


def test_critic_loss_decreases_on_zero_reward_batch():
    r = np.random.default_rng(5)
    ag = _agent(seed=5, s_dim=6, a_dim=2, config=AgentConfig(hidden_sizes=(32, 32), gamma=0.99))
    b = _batch(r, b=64, s_dim=6, a_dim=2)
    b.rewards[:] = 0.0
    first = ag.update_critic(b)
    for _ in range(199):
        last = ag.update_critic(b)
    assert last < first


def test_safety_critic_regresses_zero_labels():
    r = np.random.default_rng(6)
    ag = _agent(seed=6, s_dim=6, a_dim=2, config=AgentConfig(hidden_sizes=(32, 32)))
    b = _batch(r, b=64, s_dim=6, a_dim=2, risk=np.zeros(64))
    for _ in range(500):
        loss = ag.update_safety_critic(b)
    pred = ag.nets.safety(np.hstack([b.states, b.proposed]))
    assert loss < 1e-2 and pred.mean() < 0.05
    assert np.all((pred >= 0) & (pred <= 1))


def test_safety_perfect_predictor_and_bad_labels():
    r = np.random.default_rng(7)
    ag = _agent(seed=7)
    b = _batch(r)
    b.risks[:] = ag.nets.safety(np.hstack([b.states, b.proposed]))[:, 0]
    assert ag.safety_loss_and_grads(b)[0] == 0.0
    b.risks[0] = 1.2
    with pytest.raises(LabelOutOfRange):
        ag.update_safety_critic(b)


# actor / CSP --------------------------------------------------------------------------

def test_actor_gradient_with_csp_matches_fd():
    r = np.random.default_rng(8)
    ag = _agent(seed=8)
    states = r.normal(size=(8, 3))
    a = ag.nets.actor(states)
    c = ag.nets.safety(np.hstack([states, a]))[:, 0]
    theta = float(np.median(c))
    prof = RiskProfile(theta, 2.5)
    assert np.min(np.abs(c - theta)) > 1e-6
    _, grads = ag.actor_loss_and_grads(states, prof)
    fd = central_diff(lambda: -ag.actor_loss_and_grads(states, prof)[0], ag.nets.actor.params())
    for g, n in zip(grads, fd):
        assert rel_err(g, n) < 1e-4


def _toy_agent(lam, theta):
    """1-d state, 2-parameter tanh actor, linear Q = s + 2a, C = sigmoid(0.5 s + 3 a - 1)."""
    actor = MLP([np.array([[0.4]])], [np.array([0.1])], "tanh")
    critic = MLP([np.array([[1.0, 2.0]])], [np.array([0.0])], "linear")
    safety = MLP([np.array([[0.5, 3.0]])], [np.array([-1.0])], "sigmoid")
    nets = AgentNets(actor, critic, safety, actor.copy(), critic.copy())
    return SafetyCriticAgent(nets, RiskProfile(theta, lam), AgentConfig(),
                             np.random.default_rng(0), ReplayBuffer(10, np.random.default_rng(0)))


def test_two_parameter_actor_analytic_csp_gradient():
    lam, theta = 1.5, 0.4
    ag = _toy_agent(lam, theta)
    s = np.array([-1.0, -0.2, 0.3, 1.1, 2.0])
    a = np.tanh(0.4 * s + 0.1)
    z = 0.5 * s + 3 * a - 1
    c = 1 / (1 + np.exp(-z))
    da_dpre = 1 - a ** 2
    dj_da = 2.0 - lam * (c > theta) * c * (1 - c) * 3.0
    analytic_w = -np.mean(dj_da * da_dpre * s)
    analytic_b = -np.mean(dj_da * da_dpre)
    _, grads = ag.actor_loss_and_grads(s[:, None])
    assert grads[0][0, 0] == pytest.approx(analytic_w, rel=1e-12)
    assert grads[1][0] == pytest.approx(analytic_b, rel=1e-12)
    fd = central_diff(lambda: -ag.actor_loss_and_grads(s[:, None])[0], ag.nets.actor.params())
    assert rel_err(grads[0], fd[0]) < 1e-4 and rel_err(grads[1], fd[1]) < 1e-4


def test_csp_gating_is_exact_below_threshold():
    r = np.random.default_rng(9)
    states = r.normal(size=(16, 3))
    base = _agent(seed=9, profile=RiskProfile(1.0, 0.0))
    c = base.nets.safety(np.hstack([states, base.nets.actor(states)]))
    theta = float(c.max()) + 1e-3
    gated = _agent(seed=9, profile=RiskProfile(theta, 5.0))
    vanilla = _agent(seed=9, profile=RiskProfile(theta, 0.0))
    b = _batch(r, b=16)
    b.states[:] = states
    gated.update_actor(b)
    vanilla.update_actor(b)
    for x, y in zip(gated.nets.actor.params(), vanilla.nets.actor.params()):
        np.testing.assert_array_equal(x, y)


def test_csp_term_active_above_threshold():
    r = np.random.default_rng(10)
    states = r.normal(size=(16, 3))
    ag = _agent(seed=10)
    c = ag.nets.safety(np.hstack([states, ag.nets.actor(states)]))
    theta = float(c.min()) - 1e-3
    _, g_pen = ag.actor_loss_and_grads(states, RiskProfile(theta, 5.0))
    _, g_van = ag.actor_loss_and_grads(states, RiskProfile(theta, 0.0))
    assert max(np.max(np.abs(a - b)) for a, b in zip(g_pen, g_van)) > 0


def test_profile_ordering_on_analytic_landscape():
    """Converged action risk falls as the penalty weight rises across the grid."""
    grid, risks = converged_risks(6, steps=1500)
    assert spearmanr([p.lam for p in grid], risks).statistic <= -0.8
    # stricter profiles settle at or near their own tolerance
    assert risks[0] < grid[0].theta + 0.02


def test_train_step_waits_for_warmup():
    ag = _agent()
    assert ag.train_step() is None
    for i in range(4):
        ag.buffer.push(Transition(np.ones(3) * i, np.zeros(1), 0.0, np.ones(3), False, 0.2, np.zeros(1)))
    out = ag.train_step()
    assert set(out) == {"critic_loss", "safety_loss", "actor_objective"}
