"""Command-line entry point: ingest, train-forecaster, train-agent, backtest, report."""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig, dump_config, load_config, parse_config_text, subseed
from .data import (
    DataError,
    adf_test,
    chronological_split,
    difference,
    apply_minmax,
    fit_minmax,
    load_candles,
    make_windows,
    read_series,
    read_sidecar,
    split_sizes,
    write_series,
    write_sidecar,
)
from .env import EnvError, TradingEnv
from .nn.checkpoint import CheckpointError, load_params, save_params
from .nn.forecaster import (
    ForecasterDiverged,
    GridSpace,
    LstmForecaster,
    baseline_forecasters,
    grid_search,
    train_forecaster,
    write_history,
)
from .ppo.policy import PolicyNet
from .ppo.trainer import TrainingDiverged, bandit_check, evaluate_agent, train_agent, write_training_log
from .report import ReportError, load_traces, save_traces, summarize_run
from . import strategies as strat

logger = logging.getLogger("ppo_trader")

AGENT = "ppo_agent"
RULE_BASED = ("buy_and_hold", "golden_death_cross", "vma_oscillator")
PREDICTIVE = ("improved_momentum", "non_named_i", "non_named_ii")
ALL_STRATEGIES = (AGENT,) + RULE_BASED + PREDICTIVE
SMOKE_THRESHOLD = 0.9


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Layout helpers
# ---------------------------------------------------------------------------

def data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run.out) / "data"


def model_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run.out) / "models"


def echo_config(cfg: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg), encoding="utf-8")


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise CliError(f"missing {path}; run `{hint}` first")
    return path


def load_segment(cfg: RunConfig, split: str):
    """``(timestamps, closes, features)`` for one split, aligned so that
    ``features[t]`` is the normalized change into ``closes[t]``."""
    d = data_dir(cfg)
    ts_all, closes = read_series(_require(d / "closes.csv", "ingest"))
    _, feats = read_series(_require(d / f"{split}.csv", "ingest"))
    _, _, meta = read_sidecar(_require(d / "preprocess.txt", "ingest"))
    start = 1 + {"train": 0, "valid": int(meta["n_train"]),
                 "test": int(meta["n_train"]) + int(meta["n_valid"])}[split]
    seg = slice(start, start + len(feats))
    return ts_all[seg], closes[seg], feats


def make_env(cfg: RunConfig, split: str) -> TradingEnv:
    ts, closes, feats = load_segment(cfg, split)
    return TradingEnv(closes, cfg.env, features=feats, timestamps=ts)


def load_forecaster(cfg: RunConfig) -> LstmForecaster:
    d = model_dir(cfg)
    params = load_params(_require(d / "forecaster.nnc", "train-forecaster"))
    meta = parse_config_text((d / "forecaster.txt").read_text(encoding="utf-8")) \
        if (d / "forecaster.txt").is_file() else {}
    window = int(meta["window"]) if "window" in meta else None
    return LstmForecaster.from_params(params, float(meta.get("dropout", 0.0)), window)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, args) -> int:
    src = args.csv or cfg.data.path
    if not src:
        raise CliError("no input CSV given (positional argument or data.path)")
    out = data_dir(cfg)
    echo_config(cfg, Path(cfg.run.out) / "config" / "ingest.txt")
    series = load_candles(src)
    closes, ts = series.close, series.timestamps
    diffs, state = difference(closes)
    adf = adf_test(diffs, cfg.data.adf_lag)
    verdict = "stationary (unit root rejected)" if adf.reject_unit_root else "unit root NOT rejected"
    print(f"ADF on differenced closes: t = {adf.t_statistic:.4f}, 5% critical = "
          f"{adf.critical_value_5pct:.4f}, nobs = {adf.nobs} -> {verdict}")
    if not adf.reject_unit_root:
        logger.warning("differenced series is not stationary at the 5%% level")
    parts = chronological_split(np.arange(len(diffs)), cfg.data.split)
    n_train, n_valid, n_test = split_sizes(len(diffs), cfg.data.split)
    # Extrema come from the training split only; valid/test may leave [0, 1].
    norm = fit_minmax(diffs[parts[0]])
    scaled = apply_minmax(diffs, norm)
    out.mkdir(parents=True, exist_ok=True)
    write_series(out / "closes.csv", ts, closes)
    for name, idx in zip(("train", "valid", "test"), parts):
        write_series(out / f"{name}.csv", ts[1:][idx], scaled[idx])
    write_sidecar(out / "preprocess.txt", state, norm, n_train=n_train, n_valid=n_valid,
                  n_test=n_test, dropped_rows=series.dropped, adf_t=adf.t_statistic,
                  adf_critical_5pct=adf.critical_value_5pct)
    print(f"{len(closes)} candles ({series.dropped} invalid rows dropped); "
          f"split {n_train}/{n_valid}/{n_test} -> {out}")
    return 0


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(","))


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


def cmd_train_forecaster(cfg: RunConfig, args) -> int:
    echo_config(cfg, Path(cfg.run.out) / "config" / "train-forecaster.txt")
    echo_config(cfg, model_dir(cfg) / "forecaster.config.txt")
    fc = cfg.forecaster
    step = cfg.data.time_step
    windows = {}
    for split in ("train", "valid", "test"):
        _, vals = read_series(_require(data_dir(cfg) / f"{split}.csv", "ingest"))
        windows[split] = make_windows(vals, step)
    seed = subseed(cfg.run.seed, "forecaster")
    if args.grid:
        space = GridSpace(
            args.grid_batch or GridSpace.batch_sizes,
            args.grid_hidden or GridSpace.hidden_units,
            args.grid_dropout or GridSpace.dropout_rates,
        )
        result = grid_search(windows["train"], windows["valid"], space, seed=seed, layers=fc.layers,
                             max_epochs=fc.grid_epochs, schedule=fc.schedule, jobs=cfg.run.jobs)
        best = result.best
        print(f"grid search over {len(result.scores)} combinations: best {best}")
        fc = replace(fc, hidden=best["hidden"], dropout=best["dropout"], batch_size=best["batch_size"])
    model = LstmForecaster(fc.hidden, fc.layers, fc.dropout, seed=seed)
    result = train_forecaster(model, windows["train"], windows["valid"], fc.schedule, seed=seed)
    out = model_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_params(result.model.params, out / "forecaster.nnc")
    (out / "forecaster.txt").write_text(
        f"hidden = {fc.hidden}\nlayers = {fc.layers}\ndropout = {fc.dropout!r}\n"
        f"batch_size = {fc.batch_size}\nwindow = {step}\n", encoding="utf-8")
    write_history(result.history, out / "forecaster_history.csv")
    x_te, y_te = windows["test"]
    test_mse = float(np.mean((result.model.predict(x_te) - y_te) ** 2))
    base = baseline_forecasters(windows["train"], windows["test"])
    print(f"best valid MSE {result.best_valid_mse:.6g} at epoch {result.best_epoch} "
          f"({len(result.history)} epochs, {len(result.lr_reductions)} lr reductions)")
    print(f"test MSE {test_mse:.6g}; persistence {base.persistence:.6g}; linear {base.linear:.6g}")
    return 0


def cmd_train_agent(cfg: RunConfig, args) -> int:
    echo_config(cfg, Path(cfg.run.out) / "config" / "train-agent.txt")
    echo_config(cfg, model_dir(cfg) / "agent.config.txt")
    ppo = cfg.ppo
    if args.smoke:
        p = bandit_check(subseed(cfg.run.seed, "smoke"))
        ok = p > SMOKE_THRESHOLD
        print(f"bandit smoke check: p(rewarded action) = {p:.3f} ({'pass' if ok else 'FAIL'})")
        if not ok:
            return 1
        ppo = replace(ppo, total_iterations=2, horizon=64, minibatch_size=32, epochs_per_update=2)
    env = make_env(cfg, "train")
    out = model_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    try:
        net, log = train_agent(lambda: make_env(cfg, "train"), ppo, seed=subseed(cfg.run.seed, "train"))
    except TrainingDiverged as exc:
        path = out / "agent_last_good.nnc"
        save_params(exc.last_good, path)
        print(f"error: training diverged at iteration {exc.iteration}: {exc}; "
              f"last good parameters saved to {path}", file=sys.stderr)
        return 1
    save_params(net.params, out / "agent.nnc")
    write_training_log(log, out / "agent_log.csv")
    print(f"trained {len(log)} iterations on {len(env.closes)} candles; "
          f"final mean reward {log[-1].mean_reward:.4f} -> {out / 'agent.nnc'}")
    return 0


def _select_strategies(cfg: RunConfig, requested: str | None) -> list[str]:
    have_agent = (model_dir(cfg) / "agent.nnc").is_file()
    have_forecaster = (model_dir(cfg) / "forecaster.nnc").is_file()
    if requested in (None, "all"):
        names = [AGENT] if have_agent else []
        names += list(RULE_BASED)
        names += list(PREDICTIVE) if have_forecaster else []
        for name, ok, cmd in ((AGENT, have_agent, "train-agent"),
                              ("predictive strategies", have_forecaster, "train-forecaster")):
            if not ok:
                logger.warning("skipping %s: run `%s` first", name, cmd)
        return names
    names = [n.strip() for n in requested.split(",") if n.strip()]
    if not names:
        raise CliError("no strategies selected")
    unknown = [n for n in names if n not in ALL_STRATEGIES]
    if unknown:
        raise CliError(f"unknown strategies {unknown}; choose from {', '.join(ALL_STRATEGIES)}")
    if AGENT in names:
        _require(model_dir(cfg) / "agent.nnc", "train-agent")
    if any(n in PREDICTIVE for n in names):
        _require(model_dir(cfg) / "forecaster.nnc", "train-forecaster")
    return names


def _run_dir(cfg: RunConfig, name: str | None) -> Path:
    root = Path(cfg.run.out) / "runs"
    base = name or time.strftime("run-%Y%m%d-%H%M%S") + f"-seed{cfg.run.seed}"
    path, k = root / base, 1
    while path.exists() and name is None:
        path, k = root / f"{base}-{k}", k + 1
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_backtest(cfg: RunConfig, args) -> int:
    names = _select_strategies(cfg, args.strategies)
    if not names:
        raise CliError("no strategies selected")
    run_dir = _run_dir(cfg, args.run_name)
    config_text = dump_config(cfg)
    (run_dir / "config.txt").write_text(config_text, encoding="utf-8")
    env_seed = subseed(cfg.run.seed, "env")
    params = cfg.strategy
    forecaster = load_forecaster(cfg) if any(n in PREDICTIVE for n in names) else None
    norm = read_sidecar(data_dir(cfg) / "preprocess.txt")[1] if forecaster else None

    def run(name: str):
        env = make_env(cfg, "test")
        if name == AGENT:
            net = PolicyNet.from_params(load_params(model_dir(cfg) / "agent.nnc"))
            rows, _ = evaluate_agent(net, env, seed=env_seed)
            return rows, env.config.initial_cash
        if name == "buy_and_hold":
            tr = strat.buy_and_hold(env, env_seed)
        elif name == "golden_death_cross":
            tr = strat.golden_death_cross(env, params, env_seed)
        elif name == "vma_oscillator":
            tr = strat.vma_oscillator(env, params, env_seed)
        elif name == "improved_momentum":
            tr = strat.improved_momentum(env, forecaster, norm, params, env_seed)
        else:
            tr = strat.non_named(env, forecaster, norm, name.rsplit("_", 1)[1], params, env_seed)
        return tr.rows, tr.initial_cash

    with ThreadPoolExecutor(max_workers=max(1, cfg.run.jobs)) as pool:
        results = list(pool.map(run, names))
    traces = dict(zip(names, results))
    save_traces(traces, run_dir / "traces", cfg.run.seed)
    log_path = model_dir(cfg) / "agent_log.csv"
    if log_path.is_file():
        shutil.copyfile(log_path, run_dir / "agent_log.csv")
    missing = summarize_run(run_dir, traces, run_dir / "agent_log.csv", config_text, [cfg.run.seed])
    print((run_dir / "comparison.csv").read_text(encoding="utf-8"), end="")
    print(f"report written to {run_dir}" + (f" (missing: {', '.join(missing)})" if missing else ""))
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "traces").is_dir():
        raise CliError(f"{run_dir} has no traces/ directory")
    traces, seeds = load_traces(run_dir / "traces")
    config_path = run_dir / "config.txt"
    config_text = config_path.read_text(encoding="utf-8") if config_path.is_file() else None
    missing = summarize_run(run_dir, traces, run_dir / "agent_log.csv", config_text, seeds)
    print(f"report regenerated in {run_dir}" + (f" (missing: {', '.join(missing)})" if missing else ""))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="key = value config file")
    parser.add_argument("--seed", type=int, default=d, help="root seed for every random stream")
    parser.add_argument("--out", default=d, help="output directory (default: out)")
    parser.add_argument("--jobs", type=int, default=d, help="worker threads")
    parser.add_argument("--set", action="append", default=d if suppress else [], metavar="KEY=VALUE",
                        help="override one config key, e.g. --set env.fee_rate=0")
    parser.add_argument("-v", "--verbose", action="store_true", default=d if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppo-trader", description=__doc__)
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load, difference, test, normalize and split a candle CSV")
    _global_options(p, suppress=True)
    p.add_argument("csv", nargs="?", help="OHLCV CSV (defaults to data.path)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-forecaster", help="train the LSTM price-change forecaster")
    _global_options(p, suppress=True)
    p.add_argument("--grid", action="store_true", help="grid-search batch size, hidden units, dropout")
    p.add_argument("--grid-batch", type=_int_list, help="comma list of batch sizes")
    p.add_argument("--grid-hidden", type=_int_list, help="comma list of hidden sizes")
    p.add_argument("--grid-dropout", type=_float_list, help="comma list of dropout rates")
    p.set_defaults(func=cmd_train_forecaster)

    p = sub.add_parser("train-agent", help="train the PPO agent on the training split")
    _global_options(p, suppress=True)
    p.add_argument("--smoke", action="store_true",
                   help="bandit convergence check followed by a tiny training run")
    p.set_defaults(func=cmd_train_agent)

    p = sub.add_parser("backtest", help="evaluate the agent and benchmarks on the test split")
    _global_options(p, suppress=True)
    p.add_argument("--strategies", help=f"comma list or 'all' ({', '.join(ALL_STRATEGIES)})")
    p.add_argument("--run-name", help="run directory name under <out>/runs (default: timestamped)")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("report", help="regenerate a run report from its saved traces")
    _global_options(p, suppress=True)
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def resolve_config(args) -> RunConfig:
    overrides: dict[str, object] = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for flag, key in (("seed", "run.seed"), ("out", "run.out"), ("jobs", "run.jobs")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(cfg, args)
    except (CliError, ConfigError, DataError, EnvError, ReportError, CheckpointError,
            ForecasterDiverged, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
