"""``marsrl`` command line: ingest, synth, train, backtest, report, selftest.

Exit codes: 0 success, 1 training aborted on a non-finite value, 2 bad
config, bad data or missing files.

Config resolution: built-in defaults, then the ``--config`` file, then each
``--set key=value`` in order. A bare ``--config`` name that does not exist
is looked up in ``$MARSRL_CONFIG_DIR``; without ``--config``,
``$MARSRL_CONFIG_DIR/default.json`` is used when present.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import MarsError, TrainingAborted

CONFIG_DIR_ENV = "MARSRL_CONFIG_DIR"


def resolve_config_path(arg: str | None) -> Path | None:
    cdir = os.environ.get(CONFIG_DIR_ENV)
    if arg:
        p = Path(arg)
        if not p.exists() and cdir and (Path(cdir) / arg).exists():
            return Path(cdir) / arg
        return p
    if cdir and (Path(cdir) / "default.json").exists():
        return Path(cdir) / "default.json"
    return None


def _config(args, base: Path | None = None) -> tuple[ExperimentConfig, list[str]]:
    overrides = list(args.set or [])
    if getattr(args, "variant", None):
        overrides.append(f"train.variant={args.variant}")
    if getattr(args, "output_dir", None):
        overrides.append(f"train.output_dir={args.output_dir}")
    path = resolve_config_path(args.config)
    if path is None and base is not None and base.exists():
        path = base
    return load_config(path, overrides), overrides


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# subcommands --------------------------------------------------------------------

def cmd_ingest(args) -> int:
    from .data import load_ohlcv, write_ohlcv
    from .train import prepare_data, write_manifest
    cfg, overrides = _config(args)
    raw = load_ohlcv(args.csv, args.start, args.end, cfg.data.on_incomplete)
    data = prepare_data(cfg, raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ohlcv(raw, out / "ohlcv.csv")
    data.table.feature_frame().to_csv(out / "features.csv", index=False, lineterminator="\n")
    _write_json(out / "norm.json", data.norm.to_dict())
    counts = {name: getattr(data.splits, name).n_dates for name in ("train", "validation", "test")}
    bundle = {"symbols": list(raw.symbols), "raw_dates": raw.n_dates,
              "feature_dates": data.table.n_dates, "split_dates": counts}
    _write_json(out / "bundle.json", bundle)
    write_manifest(out, cfg, data.fingerprint, "ingest", overrides)
    print(f"ingested {raw.n_dates} dates x {raw.n_assets} symbols; "
          f"train/validation/test = {counts['train']}/{counts['validation']}/{counts['test']}")
    return 0


def cmd_synth(args) -> int:
    from .data import synthetic_ohlcv, write_ohlcv
    cfg, _ = _config(args)
    s = cfg.synth
    frame = synthetic_ohlcv(s.seed, s.n_assets, s.n_days, s.regimes, s.start_date, s.market_correlation)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_ohlcv(frame, args.out)
    print(f"wrote {s.n_days} days x {s.n_assets} assets to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .train import train
    cfg, overrides = _config(args)
    res = train(cfg, resume=args.resume, overrides=overrides)
    print(f"trained {res.run.episode} episode(s) of variant {cfg.train.variant!r}; "
          f"outputs in {res.output_dir}")
    return 0


def cmd_backtest(args) -> int:
    from .backtest import backtest_checkpoint, emit_report
    from .errors import IoFailure
    from .train import checkpoint_dirs, prepare_data, write_manifest
    run = Path(args.run)
    cfg, overrides = _config(args, base=run / "config.json")
    episode = args.episode if args.episode is not None else cfg.backtest.episode
    if episode < 0:
        dirs = checkpoint_dirs(run)
        if not dirs:
            raise IoFailure(f"no checkpoints under {run}")
        ck = dirs[-1]
    else:
        ck = run / "checkpoints" / f"ep{episode:04d}"
    if not (ck / "ensemble.json").exists():
        raise IoFailure(f"checkpoint {ck} not found")
    split = args.split or cfg.backtest.split
    data = prepare_data(cfg)
    report = backtest_checkpoint(cfg, ck, data, split)
    out = Path(args.out) if args.out else run / f"backtest_{ck.name}_{split}"
    out.mkdir(parents=True, exist_ok=True)
    emit_report(report, "json", out / "report.json")
    emit_report(report, "csv", out / "metrics.csv")
    emit_report(report, "plot-data", out / "plot_data.csv")
    write_manifest(out, cfg, data.fingerprint, "backtest", overrides, {"checkpoint": str(ck)})
    m = report.metrics
    print(f"{ck.name} on {split}: CR {m['cumulative_return_pct']:.2f}%  AR {m['annualized_return_pct']:.2f}%  "
          f"SR {m['sharpe_ratio']:.3f}  AVol {m['annualized_volatility_pct']:.2f}%  "
          f"MDD {m['max_drawdown_pct']:.2f}%  -> {out}")
    return 0


def cmd_report(args) -> int:
    from .backtest import BacktestReport, emit_report
    from .errors import IoFailure
    try:
        doc = json.loads(Path(args.report).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {args.report}: {exc}") from exc
    try:
        report = BacktestReport.from_dict(doc)
    except (KeyError, ValueError) as exc:
        raise IoFailure(f"{args.report} is not a backtest report: {exc}") from exc
    emit_report(report, args.format, args.out)
    print(f"wrote {args.format} to {args.out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return 0 if run_selftest() else 1


# parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marsrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable; value parsed as JSON)")
        return p

    p = common(sub.add_parser("ingest", help="validate an OHLCV CSV and write a feature bundle"))
    p.add_argument("csv")
    p.add_argument("--out", required=True)
    p.add_argument("--start")
    p.add_argument("--end")
    p.set_defaults(func=cmd_ingest)

    p = common(sub.add_parser("synth", help="write a seeded synthetic OHLCV CSV"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train the ensemble"))
    p.add_argument("--variant", help="full, static, homogeneous or divK")
    p.add_argument("--output-dir")
    p.add_argument("--resume", action="store_true", help="continue from the saved run state")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("backtest", help="evaluate a checkpoint greedily"))
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--episode", type=int, help="checkpoint episode (default: latest)")
    p.add_argument("--split", choices=("train", "validation", "test"))
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("report", help="re-emit a JSON report as csv or plot-data")
    p.add_argument("report")
    p.add_argument("--format", choices=("json", "csv", "plot-data"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the built-in numerical checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc} (diagnostics: {exc.dump_path})", file=sys.stderr)
        return 1
    except (MarsError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
