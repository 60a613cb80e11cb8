"""Hand-built networks with closed-form Q and C for behavioural tests."""

import numpy as np

from marsrl.agent import AgentConfig, AgentNets, Batch, ReplayBuffer, SafetyCriticAgent, profile_grid
from marsrl.nn import MLP, Adam


def landscape_agent(profile, slope=0.2, k=6.0, shift=-2.0, lr=0.01):
    """Scalar-action agent with Q = slope * a and C = sigmoid(k * a + shift), both state-free."""
    actor = MLP([np.array([[0.0]])], [np.array([0.0])], "tanh")
    critic = MLP([np.array([[0.0, slope]])], [np.array([0.0])], "linear")
    safety = MLP([np.array([[0.0, k]])], [np.array([shift])], "sigmoid")
    nets = AgentNets(actor, critic, safety, actor.copy(), critic.copy(), Adam(lr=lr))
    return SafetyCriticAgent(nets, profile, AgentConfig(), np.random.default_rng(0),
                             ReplayBuffer(10, np.random.default_rng(0)))


def converged_risks(n_agents=10, steps=2000):
    s = np.linspace(-1, 1, 16)[:, None]
    batch = Batch(s, np.zeros((16, 1)), np.zeros(16), s, np.zeros(16), np.zeros(16), np.zeros((16, 1)))
    grid = profile_grid(n_agents)
    risks = []
    for prof in grid:
        ag = landscape_agent(prof)
        for _ in range(steps):
            ag.update_actor(batch)
        a = ag.nets.actor(s)
        risks.append(float(ag.nets.safety(np.hstack([s, a])).mean()))
    return grid, np.array(risks)
