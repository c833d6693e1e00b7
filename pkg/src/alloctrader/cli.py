"""Command-line pipeline: data preparation, agent and allocator training,
backtesting, and report generation.

Every command loads and fully validates the config first, then works inside
the output directory layout `checkpoints/`, `logs/`, `reports/`, `data/`.
Failures print a single `error: ...` line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import date
from pathlib import Path

import numpy as np

from .allocator import (
    AgentRegistry,
    AllocatorConfig,
    AllocatorError,
    HierarchyEnv,
    RegisteredAgent,
    observation_size,
    read_decision_log,
    run_hierarchy,
    write_decision_log,
)
from .config import ConfigError, RunConfig, default_config, load_config
from .envs import EnvConfig, EnvError, TradingEnv
from .evaluation import (
    EquityCurve,
    EvaluationError,
    annualization_factor,
    buy_and_hold,
    compute_metrics,
    quartile_allocation,
    write_equity_csv,
    write_metrics,
)
from .market_data import (
    EmptyDataError,
    MarketDataError,
    Session,
    TIMEFRAME_ORDER,
    Timeframe,
    TradingCalendar,
    ingest_csv,
    sessions_in_range,
    synthesize,
    write_sessions_csv,
)
from .portfolio import PortfolioError, PortfolioState, TradeLogEntry, write_trade_log
from .ppo import (
    CheckpointError,
    NetworkSpec,
    PpoError,
    PolicyParameters,
    greedy_action,
    load_checkpoint,
    save_checkpoint,
    train,
)

_CLI_ERRORS = (
    ConfigError,
    MarketDataError,
    EnvError,
    PortfolioError,
    PpoError,
    CheckpointError,
    AllocatorError,
    EvaluationError,
)

STRATEGIES = ("hierarchy", "agent:1m", "agent:10m", "agent:1h", "buyhold")


class _Paths:
    def __init__(self, out_dir: str):
        self.out = Path(out_dir)
        self.checkpoints = self.out / "checkpoints"
        self.logs = self.out / "logs"
        self.reports = self.out / "reports"
        self.data = self.out / "data"
        for p in (self.checkpoints, self.logs, self.reports, self.data):
            p.mkdir(parents=True, exist_ok=True)

    def agent_checkpoint(self, tf: Timeframe, seed: int) -> Path:
        return self.checkpoints / f"agent_{tf.label}_seed{seed}.ckpt"

    def allocator_checkpoint(self, seed: int) -> Path:
        return self.checkpoints / f"allocator_seed{seed}.ckpt"


def _load_run(args) -> tuple[RunConfig, _Paths]:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = _replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = _replace(cfg, out_dir=args.out)
    return cfg, _Paths(cfg.out_dir)


def _replace(cfg: RunConfig, **kw) -> RunConfig:
    from dataclasses import replace

    return replace(cfg, **kw)


def _materialize_sessions(cfg: RunConfig) -> tuple[Session, ...]:
    if cfg.source == "synthetic":
        return synthesize(cfg.synth, cfg.seed, cfg.synth_days).sessions
    calendar = TradingCalendar.from_file(cfg.calendar_path)
    return ingest_csv(cfg.csv_path, calendar).sessions


def _require_range(sessions, start: date, end: date, label: str):
    picked = sessions_in_range(sessions, start, end)
    if not picked:
        raise MarketDataError(f"no sessions in {label} range {start}..{end}")
    return picked


def _refuse_existing(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CheckpointError(f"checkpoint exists: {path} (use --force to overwrite)")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg, paths = _load_run(args)
    result = synthesize(cfg.synth, cfg.seed, cfg.synth_days)
    bars_path = paths.data / "synthetic_bars.csv"
    write_sessions_csv(result.sessions, str(bars_path))
    result.calendar.to_file(str(paths.data / "synthetic_calendar.csv"))
    with open(paths.data / "synthetic_regimes.csv", "w", newline="") as fh:
        fh.write("timestamp,regime\n")
        for session, labels in zip(result.sessions, result.regimes):
            for bar, regime in zip(session.bars, labels):
                fh.write(f"{bar.timestamp.isoformat()},{int(regime)}\n")
    total = sum(len(s) for s in result.sessions)
    print(f"generated {len(result.sessions)} sessions ({total} bars) under {paths.data}")
    return 0


def cmd_ingest(args) -> int:
    cfg, paths = _load_run(args)
    csv_path = args.csv or cfg.csv_path
    calendar_path = args.calendar or cfg.calendar_path
    if not csv_path or not calendar_path:
        raise ConfigError(
            "ingest needs data.csv_path and data.calendar_path (or --csv/--calendar)"
        )
    calendar = TradingCalendar.from_file(calendar_path)
    result = ingest_csv(csv_path, calendar)
    out_path = paths.data / "sessions.csv"
    write_sessions_csv(result.sessions, str(out_path))
    total = sum(len(s) for s in result.sessions)
    print(
        f"ingested {len(result.sessions)} sessions ({total} bars), "
        f"dropped {result.dropped_rows} out-of-session rows -> {out_path}"
    )
    return 0


def cmd_train_agent(args) -> int:
    cfg, paths = _load_run(args)
    tf = Timeframe.from_label(args.timeframe)
    settings = cfg.agents[tf]
    ckpt_path = paths.agent_checkpoint(tf, cfg.seed)
    _refuse_existing(ckpt_path, args.force)
    sessions = _materialize_sessions(cfg)
    train_sessions = _require_range(sessions, *cfg.train_range, "train")
    env_config = EnvConfig(
        timeframe=tf,
        window_size=settings.window_size,
        initial_cash=settings.initial_cash,
        fee_per_sell_share=cfg.fee_per_sell_share,
    )
    spec = NetworkSpec(settings.window_size * 8, settings.hidden, 3)
    params, curve = train(
        lambda: TradingEnv(train_sessions, env_config), spec, settings.hyperparams, cfg.seed
    )
    save_checkpoint(
        str(ckpt_path),
        params,
        settings.hyperparams,
        cfg.seed,
        extra={
            "kind": "agent",
            "timeframe": tf.label,
            "window_size": settings.window_size,
            "initial_cash": settings.initial_cash,
        },
    )
    curve_path = paths.logs / f"train_curve_agent_{tf.label}_seed{cfg.seed}.csv"
    curve.to_csv(str(curve_path))
    print(f"trained {tf.label} agent for {settings.hyperparams.total_timesteps} timesteps "
          f"-> {ckpt_path}")
    return 0


def _load_registry(cfg: RunConfig, paths: _Paths) -> AgentRegistry:
    agents = {}
    for tf in TIMEFRAME_ORDER:
        path = paths.agent_checkpoint(tf, cfg.seed)
        if not path.exists():
            raise CheckpointError(f"missing checkpoint: {tf.label} (expected {path})")
        ckpt = load_checkpoint(str(path))
        extra = ckpt.extra
        env_config = EnvConfig(
            timeframe=Timeframe.from_label(extra["timeframe"]),
            window_size=int(extra["window_size"]),
            initial_cash=float(extra["initial_cash"]),
            fee_per_sell_share=cfg.fee_per_sell_share,
        )
        agents[tf] = RegisteredAgent(params=ckpt.params, config=env_config)
    return AgentRegistry(agents)


def _allocator_config(cfg: RunConfig) -> AllocatorConfig:
    return AllocatorConfig(
        market_window=cfg.allocator.market_window,
        vol_window=cfg.allocator.vol_window,
        initial_cash=cfg.allocator.initial_cash,
        fee_per_sell_share=cfg.fee_per_sell_share,
    )


def cmd_train_allocator(args) -> int:
    cfg, paths = _load_run(args)
    ckpt_path = paths.allocator_checkpoint(cfg.seed)
    _refuse_existing(ckpt_path, args.force)
    registry = _load_registry(cfg, paths)
    sessions = _materialize_sessions(cfg)
    train_sessions = _require_range(sessions, *cfg.train_range, "train")
    alloc_config = _allocator_config(cfg)
    spec = NetworkSpec(observation_size(alloc_config), cfg.allocator.hidden, 3)
    params, curve = train(
        lambda: HierarchyEnv(train_sessions, registry, alloc_config),
        spec,
        cfg.allocator.hyperparams,
        cfg.seed,
    )
    save_checkpoint(
        str(ckpt_path),
        params,
        cfg.allocator.hyperparams,
        cfg.seed,
        extra={
            "kind": "allocator",
            "market_window": cfg.allocator.market_window,
            "vol_window": cfg.allocator.vol_window,
            "initial_cash": cfg.allocator.initial_cash,
        },
    )
    curve.to_csv(str(paths.logs / f"train_curve_allocator_seed{cfg.seed}.csv"))
    print(f"trained allocator for {cfg.allocator.hyperparams.total_timesteps} timesteps "
          f"-> {ckpt_path}")
    return 0


def _write_backtest(
    paths: _Paths,
    name: str,
    curve: EquityCurve,
    trades,
    periods_per_year: float,
) -> None:
    write_equity_csv(curve, str(paths.reports / f"{name}_equity.csv"))
    write_trade_log(trades, str(paths.reports / f"{name}_trades.csv"))
    report = compute_metrics(curve, periods_per_year)
    write_metrics(
        report,
        str(paths.reports / f"{name}_metrics.json"),
        str(paths.reports / f"{name}_metrics.txt"),
    )
    print(f"{name}: {report.to_text()}", end="")


def _backtest_buyhold(cfg: RunConfig, paths: _Paths, test_sessions) -> None:
    curve = buy_and_hold(test_sessions, cfg.allocator.initial_cash)
    first = test_sessions[0].bars[0]
    shares = int(cfg.allocator.initial_cash // first.close)
    trades = [TradeLogEntry(first.timestamp, "buy", shares, first.close, 0.0)] if shares else []
    _write_backtest(paths, "buyhold", curve, trades, annualization_factor(curve.timestamps))


def _backtest_agent(cfg: RunConfig, paths: _Paths, sessions, test_start: date, label: str) -> None:
    tf = Timeframe.from_label(label)
    path = paths.agent_checkpoint(tf, cfg.seed)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {tf.label} (expected {path})")
    ckpt = load_checkpoint(str(path))
    env_config = EnvConfig(
        timeframe=tf,
        window_size=int(ckpt.extra["window_size"]),
        initial_cash=float(ckpt.extra["initial_cash"]),
        fee_per_sell_share=cfg.fee_per_sell_share,
    )
    env = TradingEnv(sessions, env_config)
    cursor = next(
        (i for i, ts in enumerate(env.timestamps) if ts.date() >= test_start), None
    )
    if cursor is None:
        raise MarketDataError(f"no bars on or after test start {test_start}")
    if cursor < env.min_cursor:
        raise EnvError(
            f"insufficient warmup before test start {test_start}: bar {cursor} "
            f"but observations need {env.min_cursor + 1} bars of history"
        )
    obs = env.reset(cursor)
    points = [(env.current_timestamp, env.portfolio_value)]
    while not env.done:
        result = env.step(greedy_action(ckpt.params, obs))
        obs = result.observation
        points.append((result.info["timestamp"], result.info["portfolio_value"]))
    curve = EquityCurve.from_pairs(points)
    name = f"agent_{tf.label}"
    _write_backtest(paths, name, curve, env.trades, annualization_factor(curve.timestamps))


def _backtest_hierarchy(cfg: RunConfig, paths: _Paths, sessions, test_start: date) -> None:
    alloc_path = paths.allocator_checkpoint(cfg.seed)
    if not alloc_path.exists():
        raise CheckpointError(f"missing checkpoint: allocator (expected {alloc_path})")
    registry = _load_registry(cfg, paths)
    ckpt = load_checkpoint(str(alloc_path))
    alloc_config = AllocatorConfig(
        market_window=int(ckpt.extra["market_window"]),
        vol_window=int(ckpt.extra["vol_window"]),
        initial_cash=float(ckpt.extra["initial_cash"]),
        fee_per_sell_share=cfg.fee_per_sell_share,
    )
    report = run_hierarchy(sessions, registry, ckpt.params, alloc_config, start_day=test_start)
    curve = EquityCurve.from_pairs(report.equity)
    write_decision_log(report.decisions, str(paths.reports / "hierarchy_allocations.csv"))
    _write_backtest(
        paths, "hierarchy", curve, report.trades, annualization_factor(curve.timestamps)
    )


def cmd_backtest(args) -> int:
    cfg, paths = _load_run(args)
    if args.strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {', '.join(STRATEGIES)}, got {args.strategy}")
    sessions = _materialize_sessions(cfg)
    test_start, test_end = cfg.test_range
    test_sessions = _require_range(sessions, test_start, test_end, "test")
    # Sessions before the test range stay available as indicator warmup.
    eval_sessions = sessions_in_range(sessions, None, test_end)
    if args.strategy == "buyhold":
        _backtest_buyhold(cfg, paths, test_sessions)
    elif args.strategy.startswith("agent:"):
        _backtest_agent(cfg, paths, eval_sessions, test_start, args.strategy.split(":", 1)[1])
    else:
        _backtest_hierarchy(cfg, paths, eval_sessions, test_start)
    return 0


def cmd_analyze(args) -> int:
    cfg, paths = _load_run(args)
    log_path = args.log or str(paths.reports / "hierarchy_allocations.csv")
    if not os.path.exists(log_path):
        raise AllocatorError(f"allocation log not found: {log_path} (run backtest hierarchy first)")
    decisions = read_decision_log(log_path)
    if not decisions:
        raise AllocatorError(f"allocation log {log_path} has no decisions")
    sessions = _materialize_sessions(cfg)
    data_start = sessions[0].bars[0].timestamp
    data_end = sessions[-1].bars[-1].timestamp
    log_start = min(d.timestamp for d in decisions)
    log_end = max(d.timestamp for d in decisions)
    if log_start < data_start or log_end > data_end:
        raise AllocatorError(
            f"allocation log spans {log_start}..{log_end} but market data spans "
            f"{data_start}..{data_end}"
        )
    report = quartile_allocation(decisions, sessions, args.granularity)
    stem = paths.reports / f"quartiles_{args.granularity}"
    with open(f"{stem}.json", "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(f"{stem}.txt", "w") as fh:
        fh.write(report.to_text())
    report.to_plot_csv(f"{stem}.csv")
    print(report.to_text(), end="")
    return 0


def cmd_report(args) -> int:
    cfg, paths = _load_run(args)
    metric_files = sorted(paths.reports.glob("*_metrics.json"))
    if not metric_files:
        raise EvaluationError(
            f"no metrics files under {paths.reports}; run backtest first"
        )
    lines = [
        f"{'strategy':<12} {'return %':>10} {'sharpe':>10} {'mdd %':>10}",
    ]
    for path in metric_files:
        with open(path) as fh:
            data = json.load(fh)
        name = path.name.replace("_metrics.json", "")
        sharpe_val = data["sharpe"]
        sharpe_text = "undef" if sharpe_val is None else f"{sharpe_val:.4f}"
        lines.append(
            f"{name:<12} {data['cumulative_return_pct']:>10.2f} {sharpe_text:>10} "
            f"{data['max_drawdown_pct']:>10.2f}"
        )
    for path in sorted(paths.reports.glob("quartiles_*.txt")):
        lines.append("")
        lines.append(path.read_text().rstrip("\n"))
    text = "\n".join(lines) + "\n"
    (paths.reports / "summary.txt").write_text(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a key = value config file")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", help="override run.out_dir")
    common.add_argument("--force", action="store_true",
                        help="overwrite existing checkpoints")

    parser = argparse.ArgumentParser(
        prog="alloctrader",
        description="Hierarchical multi-timeframe trading agents: train, backtest, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="normalize an OHLCV CSV into sessions")
    p.add_argument("--csv", help="input CSV (defaults to data.csv_path)")
    p.add_argument("--calendar", help="calendar file (defaults to data.calendar_path)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic minute bars")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-agent", parents=[common], help="train one timeframe agent")
    p.add_argument("timeframe", choices=[tf.label for tf in TIMEFRAME_ORDER])
    p.set_defaults(func=cmd_train_agent)

    p = sub.add_parser("train-allocator", parents=[common],
                       help="train the allocator over frozen agents")
    p.set_defaults(func=cmd_train_allocator)

    p = sub.add_parser("backtest", parents=[common], help="run a strategy over the test range")
    p.add_argument("strategy", choices=list(STRATEGIES))
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("analyze", parents=[common],
                       help="volatility-quartile allocation analysis")
    p.add_argument("--log", help="allocation log CSV (default: reports/hierarchy_allocations.csv)")
    p.add_argument("--granularity", choices=["monthly", "daily", "hourly"], default="daily")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", parents=[common], help="combine emitted reports into a summary")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _CLI_ERRORS as exc:
        message = str(exc).replace("\n", "; ")
        print(f"error: {message}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
