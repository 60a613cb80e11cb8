"""Train a small ensemble on a synthetic market, then backtest it on the test span."""

# %%
import tempfile

import numpy as np
import pandas as pd

from marsrl.backtest import backtest_checkpoint
from marsrl.config import load_config
from marsrl.meta import group_weights
from marsrl.train import checkpoint_dirs, prepare_data, train

out = tempfile.mkdtemp(prefix="marsrl_demo_")
cfg = load_config(None, ["synth.n_assets=3", "synth.n_days=300", "train.n_agents=6",
                         "agent.hidden_sizes=[32,32]", "mac.hidden_sizes=[32]", "train.max_episodes=4",
                         f"train.output_dir={out}"])
data = prepare_data(cfg)
res = train(cfg, data=data)

# %%
episodes = pd.read_csv(f"{out}/episodes.csv")
print(episodes[["episode", "noise_scale", "episode_return", "final_value", "agent_updates"]])

# %%
report = backtest_checkpoint(cfg, checkpoint_dirs(out)[-1], data, "test")
for k, v in report.metrics.items():
    print(f"{k:28s} {v}")
groups = group_weights(np.array(report.weights)).mean(axis=0)
print("mean weight on conservative/neutral/aggressive thirds", np.round(groups, 3))
