"""Environmental risk score and the compliance overlay on a hand-made book."""

# %%
import numpy as np

from marsrl.env import PortfolioState
from marsrl.risk import RiskConfig, env_risk, overlay_validate

prices = np.array([100.0, 50.0, 20.0])
book = PortfolioState(cash=700_000.0, holdings=np.array([1500.0, 2000.0, 0.0]), prices=prices,
                      t=0, values=[1e6], initial_value=1e6)
print("value", book.value, "weights", np.round(book.positions / book.value, 3))

# %%
g = np.random.default_rng(0)
returns = g.normal(0.0, 0.015, (30, 3))
for action in ([0, 0, 0], [1, 0, 0], [-1, -1, 0], [1, 1, 1]):
    r = env_risk(book, np.array(action, float), returns)
    print(action, f"total {r.total:.3f}  conc {r.concentration:.3f}  lev {r.leverage:.3f}  "
                  f"vol {r.simulated_volatility:.3f}")

# %%
# the 15% position may only grow to the 20% cap; the oversell is clipped to the holding
cfg = RiskConfig()
raw = np.array([1.0, -3.0, 0.5])
ok = overlay_validate(raw, book, cfg, max_trade_fraction=0.1, cost_rate=0.001)
print("proposed", raw, "-> executed", np.round(ok, 4))
print("idempotent:", np.array_equal(overlay_validate(ok, book, cfg, 0.1, 0.001), ok))
