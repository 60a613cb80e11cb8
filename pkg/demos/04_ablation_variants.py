"""The ablation variants side by side: full, static, homogeneous and div3."""

# %%
import tempfile

from marsrl.backtest import backtest_checkpoint
from marsrl.config import load_config
from marsrl.train import checkpoint_dirs, prepare_data, train

base = ["synth.n_assets=3", "synth.n_days=300", "train.n_agents=6", "agent.hidden_sizes=[32,32]",
        "mac.hidden_sizes=[32]", "train.max_episodes=3", "train.step_traces=false"]
data = prepare_data(load_config(None, base))

# %%
for variant in ("full", "static", "homogeneous", "div3"):
    out = tempfile.mkdtemp(prefix=f"marsrl_{variant}_")
    cfg = load_config(None, base + [f"train.variant={variant}", f"train.output_dir={out}"])
    res = train(cfg, data=data)
    m = backtest_checkpoint(cfg, checkpoint_dirs(out)[-1], data, "test").metrics
    profiles = [f"{a.profile.theta:.2f}/{a.profile.lam:.2f}" for a in res.run.ensemble.agents]
    print(f"{variant:12s} CR {m['cumulative_return_pct']:7.2f}%  MDD {m['max_drawdown_pct']:6.2f}%  "
          f"SR {m['sharpe_ratio']:6.2f}  profiles {profiles}")
