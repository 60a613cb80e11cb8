"""Synthetic market, technical indicators and the train/validation/test split."""

# %%
import numpy as np

from marsrl.config import load_config
from marsrl.data import regime_labels, synthetic_market
from marsrl.train import prepare_data

# two regimes: a calm uptrend, then a volatile selloff
regimes = [(0, 0.0008, 0.008), (250, -0.0015, 0.025)]
raw = synthetic_market(seed=7, n_assets=3, n_days=400, regimes=regimes)
print(raw.symbols, raw.n_dates, "dates")

# %%
# daily return volatility per regime, measured from the generated closes
close = raw.close
rets = close[1:] / close[:-1] - 1
labels = regime_labels(400, regimes)[1:]
for k in (0, 1):
    print(f"regime {k}: realised daily vol {rets[labels == k].std():.4f}")

# %%
cfg = load_config(None, ["synth.n_assets=3", "synth.n_days=400", "synth.seed=7",
                         f"synth.regimes={[list(r) for r in regimes]}"])
data = prepare_data(cfg)
feat = data.table.feature_frame()
print(feat.head())
for name in ("train", "validation", "test"):
    part = getattr(data.splits, name)
    print(f"{name:10s} {part.n_dates:4d} rows  {part.dates[0]} .. {part.dates[-1]}")
