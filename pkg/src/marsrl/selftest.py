"""Self-contained numerical checks behind ``marsrl selftest``.

Each check compares the library against an independent computation
(finite differences, brute force, or longhand bookkeeping) and reports
pass or fail.
"""

from __future__ import annotations

import math
import time

import numpy as np

from .agent import AgentConfig, Batch, RiskProfile, SafetyCriticAgent
from .backtest import metrics
from .env import EnvConfig, PortfolioEnv, PortfolioState
from .meta import MacConfig, MetaController
from .risk import RiskConfig, env_risk, overlay_validate


def central_diff(f, arrays, h=1e-6):
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def _rel(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _toy_agent(seed):
    cfg = AgentConfig(hidden_sizes=(2,), batch_size=4, buffer_capacity=16, actor_final_bound=1.0)
    r = np.random.default_rng(seed)
    return SafetyCriticAgent.create(3, 1, RiskProfile(0.5, 1.0), cfg, r, r, r)


def check_gradients(seed=0) -> tuple[bool, str]:
    r = np.random.default_rng(seed)
    ag = _toy_agent(seed)
    b = 6
    batch = Batch(r.normal(size=(b, 3)), r.uniform(-1, 1, (b, 1)), r.normal(size=b), r.normal(size=(b, 3)),
                  np.zeros(b), r.uniform(size=b), r.uniform(-1, 1, (b, 1)))
    worst = {}
    _, g = ag.critic_loss_and_grads(batch)
    fd = central_diff(lambda: ag.critic_loss_and_grads(batch)[0], ag.nets.critic.params())
    worst["critic"] = max(_rel(x, y) for x, y in zip(g, fd))
    _, g = ag.safety_loss_and_grads(batch)
    fd = central_diff(lambda: ag.safety_loss_and_grads(batch)[0], ag.nets.safety.params())
    worst["safety"] = max(_rel(x, y) for x, y in zip(g, fd))
    c = ag.nets.safety(np.hstack([batch.states, ag.nets.actor(batch.states)]))[:, 0]
    prof = RiskProfile(float(np.median(c)), 2.0)
    _, g = ag.actor_loss_and_grads(batch.states, prof)
    fd = central_diff(lambda: -ag.actor_loss_and_grads(batch.states, prof)[0], ag.nets.actor.params())
    worst["actor"] = max(_rel(x, y) for x, y in zip(g, fd))
    mac = MetaController.create(2, 2, MacConfig(hidden_sizes=(3,)), r, r)
    s, q, cc = r.normal(size=(2, 2)), r.normal(size=(2, 2)), r.uniform(size=(2, 2))
    _, g = mac.loss_and_grads(s, q, cc)
    fd = central_diff(lambda: mac.loss_and_grads(s, q, cc)[0], mac.net.params())
    worst["mac"] = max(_rel(x, y) for x, y in zip(g, fd))
    ok = all(v < 1e-4 for v in worst.values())
    return ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


def check_csp_gating(seed=1) -> tuple[bool, str]:
    r = np.random.default_rng(seed)
    states = r.normal(size=(16, 3))
    probe = _toy_agent(seed)
    c = probe.nets.safety(np.hstack([states, probe.nets.actor(states)]))
    _, g_gated = _toy_agent(seed).actor_loss_and_grads(states, RiskProfile(min(1.0, c.max() + 1e-3), 5.0))
    _, g_plain = _toy_agent(seed).actor_loss_and_grads(states, RiskProfile(0.5, 0.0))
    same = all(np.array_equal(a, b) for a, b in zip(g_gated, g_plain))
    _, g_pen = _toy_agent(seed).actor_loss_and_grads(states, RiskProfile(max(0.0, c.min() - 1e-3), 5.0))
    active = any(np.any(a != b) for a, b in zip(g_pen, g_plain))
    return same and active, f"gated identical={same}, active term nonzero={active}"


def random_book(r, d=None):
    d = d or int(r.integers(1, 6))
    prices = r.uniform(5.0, 500.0, d)
    v_target = r.uniform(1e4, 1e6)
    w = r.dirichlet(np.ones(d + 1)) * r.uniform(0.0, 0.95)
    w = np.minimum(w[:d], 0.2)
    holdings = np.floor(w * v_target / prices)
    cash = v_target - holdings @ prices
    return PortfolioState(float(cash), holdings, prices, 0, [v_target], v_target)


def check_overlay(n=2000, seed=2) -> tuple[bool, str]:
    r = np.random.default_rng(seed)
    cfg = RiskConfig()
    bad = 0
    for _ in range(n):
        p = random_book(r)
        a = r.uniform(-1.5, 1.5, len(p.holdings))
        cost = float(r.choice([0.0, 0.001, 0.01]))
        ex = overlay_validate(a, p, cfg, 0.1, cost)
        if not np.array_equal(overlay_validate(ex, p, cfg, 0.1, cost), ex):
            bad += 1
            continue
        v = p.value
        cash, h = p.cash, p.holdings.copy()
        orders = [math.trunc(round(x * 0.1 * v / px, 9)) for x, px in zip(ex, p.prices)]
        for i, o in enumerate(orders):
            if o < 0:
                sold = min(-o, h[i])
                h[i] -= sold
                cash += sold * p.prices[i] * (1 - cost)
        for i, o in enumerate(orders):
            if o > 0:
                h[i] += o
                cash -= o * p.prices[i] * (1 + cost)
        slack = max(p.prices)
        if (h < 0).any() or (h * p.prices > cfg.concentration_cap * v + p.prices + 1e-9 * v).any() \
                or cash < cfg.cash_buffer * v - slack - 1e-9 * v:
            bad += 1
    return bad == 0, f"{n - bad}/{n} pairs compliant and idempotent"


def check_risk_bounds(n=2000, seed=3) -> tuple[bool, str]:
    r = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        p = random_book(r)
        d = len(p.holdings)
        rs = env_risk(p, r.uniform(-1, 1, d), r.normal(0, 0.03, (30, d)))
        vals = (rs.total, rs.concentration, rs.leverage, rs.simulated_volatility)
        bad += not all(0.0 <= x <= 1.0 for x in vals)
    cash = PortfolioState(1e6, np.zeros(3), np.full(3, 10.0), 0, [1e6], 1e6)
    anchor0 = env_risk(cash, np.zeros(3), np.zeros((30, 3))).total == 0.0
    allin = PortfolioState(0.0, np.array([1000.0]), np.array([100.0]), 0, [1e5], 1e5)
    anchor1 = env_risk(allin, np.zeros(1), np.zeros((30, 1))).concentration == 1.0
    return bad == 0 and anchor0 and anchor1, f"{n - bad}/{n} in [0,1], anchors {anchor0 and anchor1}"


def _brute_mdd(v):
    return min(v[j] / v[i] - 1.0 for i in range(len(v)) for j in range(i, len(v)))


def check_metrics(n=300, seed=4) -> tuple[bool, str]:
    r = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        k = int(r.integers(2, 51))
        v = list(100.0 * np.cumprod(np.r_[1.0, 1.0 + r.normal(0, 0.02, k - 1)]))
        m = metrics(v)
        rets = [v[i + 1] / v[i] - 1 for i in range(k - 1)]
        mu = sum(rets) / len(rets)
        sd = math.sqrt(sum((x - mu) ** 2 for x in rets) / len(rets)) * math.sqrt(252)
        cr = v[-1] / v[0] - 1
        want = (cr, (1 + cr) ** (252 / len(rets)) - 1, sd, mu * 252 / sd if sd > 0 else 0.0)
        got = (m.cumulative_return, m.annualized_return, m.annualized_volatility, m.sharpe_ratio)
        close = all(abs(g - w) <= 1e-12 * max(1.0, abs(w)) for g, w in zip(got, want))
        bad += not (close and m.max_drawdown == _brute_mdd(v))
    hand = metrics([100, 110, 99, 121]).max_drawdown
    return bad == 0 and abs(hand + 0.1) < 1e-12, f"{n - bad}/{n} curves match, hand MDD {100 * hand:.2f}%"


def check_reward_identity(seed=5) -> tuple[bool, str]:
    r = np.random.default_rng(seed)
    t, d = 80, 3
    prices = 100 * np.cumprod(1 + r.normal(0.0005, 0.02, (t, d)), axis=0)
    env = PortfolioEnv(prices, r.normal(size=(t, d, 5)), EnvConfig())
    env.reset()
    worst = 0.0
    while not env.done:
        p = env.portfolio
        out = env.step(overlay_validate(r.uniform(-1, 1, d), p, RiskConfig(), 0.1, 0.001))
        q = out.portfolio
        ident = (out.value - out.prev_value) / out.prev_value - out.cost - out.risk_penalty
        worst = max(worst, abs(ident - out.reward) / max(1e-12, abs(out.reward)),
                    abs(q.cash + q.holdings @ q.prices - out.value) / out.value)
        if q.cash < 0 or (q.holdings < 0).any():
            worst = math.inf
    return worst <= 1e-9, f"worst relative residual {worst:.1e}"


CHECKS = (
    ("gradients", check_gradients),
    ("csp-gating", check_csp_gating),
    ("overlay", check_overlay),
    ("risk-bounds", check_risk_bounds),
    ("metrics", check_metrics),
    ("reward-identity", check_reward_identity),
)


def run_selftest(echo=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    return all_ok
