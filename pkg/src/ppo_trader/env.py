"""Episodic single-asset market simulator with fees, slippage and lot sizes.

The environment walks a close-price segment one candle at a time. At each
step an order is filled at the current close moved adversely by a uniform
slippage draw, the portfolio is marked to market at that close, the cursor
advances, and the Omega ratio of the trailing net-worth returns is returned
as the reward.

Holdings are tracked internally as an integer number of lots, so they are
always an exact multiple of the minimum trading unit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import apply_minmax, fit_minmax

BUY, SELL, HOLD = "buy", "sell", "hold"
KINDS = (BUY, SELL, HOLD)

TRACE_COLUMNS = (
    "step", "timestamp", "close", "action_kind", "level", "exec_price",
    "quantity", "fee", "cash", "holdings", "net_worth", "reward",
)


class EnvError(RuntimeError):
    pass


@dataclass
class EnvConfig:
    initial_cash: float = 10_000.0
    fee_rate: float = 0.0025
    max_slippage: float = 0.02
    min_unit: float = 0.125
    amount_levels: int = 8
    observation_window: int = 10
    omega_window: int = 60
    omega_threshold: float = 0.0
    omega_cap: float = 10.0

    def __post_init__(self) -> None:
        for name in ("fee_rate", "max_slippage"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.min_unit <= 0:
            raise ValueError("min_unit must be positive")
        if self.initial_cash <= 0:
            raise ValueError("initial_cash must be positive")
        if self.amount_levels < 1:
            raise ValueError("amount_levels must be >= 1")
        if self.observation_window < 2 or self.omega_window < 2:
            raise ValueError("observation and omega windows must be >= 2")

    @property
    def n_actions(self) -> int:
        return 3 * self.amount_levels

    @property
    def observation_size(self) -> int:
        return self.observation_window + 2


@dataclass(frozen=True)
class DiscreteAction:
    kind: str
    level: int


def decode_action(index: int, amount_levels: int = 8) -> DiscreteAction:
    """Flat index -> (kind, level); kinds are blocks of ``amount_levels``."""
    if not 0 <= index < 3 * amount_levels:
        raise ValueError(f"action index {index} outside [0, {3 * amount_levels})")
    kind_idx, level = divmod(int(index), amount_levels)
    return DiscreteAction(KINDS[kind_idx], level + 1)


def encode_action(action: DiscreteAction, amount_levels: int = 8) -> int:
    if action.kind not in KINDS or not 1 <= action.level <= amount_levels:
        raise ValueError(f"invalid action {action}")
    return KINDS.index(action.kind) * amount_levels + action.level - 1


@dataclass
class Portfolio:
    cash: float
    lots: int
    min_unit: float

    @property
    def holdings(self) -> float:
        return self.lots * self.min_unit


def mark_to_market(portfolio: Portfolio, close: float) -> float:
    if close <= 0:
        raise ValueError("mark price must be positive")
    return portfolio.cash + portfolio.holdings * close


def omega_ratio(returns: Sequence[float], threshold: float = 0.0, cap: float = 10.0) -> float:
    """Discrete Omega: summed gains over summed losses relative to ``threshold``.

    Clipped to ``[0, cap]``; a window with gains and no losses gives ``cap``,
    a window with neither gives 1.
    """
    x = np.asarray(returns, dtype=np.float64)
    # exactly rounded sums, so mirrored windows balance to exactly 1
    gains = math.fsum(np.maximum(x - threshold, 0.0))
    losses = math.fsum(np.maximum(threshold - x, 0.0))
    if losses == 0.0:
        return cap if gains > 0.0 else 1.0
    return min(max(gains / losses, 0.0), cap)


def omega_reward(networth_history: Sequence[float], config: EnvConfig) -> float:
    nw = np.asarray(networth_history, dtype=np.float64)
    if nw.size < 2:
        return 0.0
    tail = nw[-(config.omega_window + 1):]
    returns = tail[1:] / tail[:-1] - 1.0
    return omega_ratio(returns, config.omega_threshold, config.omega_cap)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def default_features(closes: np.ndarray) -> np.ndarray:
    """Min-max scaled one-step price changes; element 0 is the change into close[0]."""
    diffs = np.diff(closes, prepend=closes[0])
    if np.ptp(diffs[1:]) == 0:
        return np.zeros_like(diffs)
    return apply_minmax(diffs, fit_minmax(diffs[1:]))


class TradingEnv:
    """Reset/step trading simulator over one price segment.

    ``features[t]`` is the (already normalized) price change into candle
    ``t``; observations are the last ``observation_window`` features plus the
    cash and holdings shares of net worth.
    """

    def __init__(self, closes: Sequence[float], config: EnvConfig | None = None,
                 features: Sequence[float] | None = None,
                 timestamps: Sequence[int] | None = None):
        self.config = config or EnvConfig()
        self.closes = np.asarray(closes, dtype=np.float64)
        if self.closes.ndim != 1 or np.any(self.closes <= 0) or not np.all(np.isfinite(self.closes)):
            raise EnvError("closes must be a 1-d series of positive finite prices")
        self.features = default_features(self.closes) if features is None \
            else np.asarray(features, dtype=np.float64)
        if self.features.shape != self.closes.shape:
            raise EnvError("features must align one-to-one with closes")
        self.timestamps = np.arange(len(self.closes), dtype=np.int64) if timestamps is None \
            else np.asarray(timestamps, dtype=np.int64)
        self.portfolio: Portfolio | None = None
        self.cursor = 0
        self.done = True
        self.networth_history: list[float] = []
        self.trace: list[dict] = []
        self._rng = np.random.default_rng(0)

    # -- protocol ----------------------------------------------------------

    @property
    def n_actions(self) -> int:
        return self.config.n_actions

    @property
    def observation_size(self) -> int:
        return self.config.observation_size

    @property
    def first_step(self) -> int:
        return self.config.observation_window

    def reset(self, seed: int | np.random.SeedSequence | None = None) -> np.ndarray:
        w = self.config.observation_window
        if len(self.closes) <= w + 1:
            raise EnvError(f"segment of length {len(self.closes)} too short for window {w}")
        self._rng = np.random.default_rng(seed)
        self.portfolio = Portfolio(self.config.initial_cash, 0, self.config.min_unit)
        self.cursor = w
        self.done = False
        self.networth_history = [self.config.initial_cash]
        self.trace = []
        return self._observation()

    @property
    def net_worth(self) -> float:
        return self.networth_history[-1]

    @property
    def profit_rate(self) -> float:
        return (self.net_worth - self.config.initial_cash) / self.config.initial_cash * 100.0

    def step(self, action: int) -> StepResult:
        act = decode_action(action, self.config.amount_levels)
        return self._execute(act.kind, level=act.level)

    def step_quantity(self, kind: str, quantity: float) -> StepResult:
        """Trade an explicit BTC quantity, quantized down to the lot grid.

        Orders larger than what cash or holdings allow shrink to the largest
        feasible size; zero-sized orders become holds.
        """
        if kind not in KINDS:
            raise ValueError(f"unknown order kind {kind!r}")
        if quantity < 0 or not math.isfinite(quantity):
            raise ValueError("quantity must be a non-negative finite number")
        return self._execute(kind, quantity=quantity)

    # -- internals ---------------------------------------------------------

    def _observation(self) -> np.ndarray:
        w = self.config.observation_window
        t = min(self.cursor, len(self.closes) - 1)
        price = self.features[t - w + 1:t + 1]
        nw = mark_to_market(self.portfolio, self.closes[t])
        held = self.portfolio.holdings * self.closes[t]
        return np.concatenate([price, [self.portfolio.cash / nw, held / nw]])

    def _execute(self, kind: str, level: int | None = None, quantity: float | None = None) -> StepResult:
        if self.done:
            raise EnvError("step() called on a finished episode; call reset()")
        cfg = self.config
        pf = self.portfolio
        t = self.cursor
        close = float(self.closes[t])
        lot = cfg.min_unit
        lots = 0
        exec_price = close
        fee = 0.0
        cash_before = pf.cash

        if kind != HOLD:
            slip = float(self._rng.uniform(0.0, cfg.max_slippage)) if cfg.max_slippage > 0 else 0.0
            if kind == BUY:
                exec_price = close * (1.0 + slip)
                unit_cost = exec_price * (1.0 + cfg.fee_rate)
                affordable = int(math.floor(pf.cash / unit_cost / lot))
                while affordable > 0 and affordable * lot * unit_cost > pf.cash:
                    affordable -= 1
                if level is not None:
                    target = level / cfg.amount_levels * pf.cash
                    lots = min(int(math.floor(target / unit_cost / lot)), affordable)
                else:
                    lots = min(int(math.floor(quantity / lot + 1e-9)), affordable)
                if lots > 0:
                    gross = lots * lot * exec_price
                    fee = gross * cfg.fee_rate
                    pf.cash = pf.cash - gross - fee
                    pf.lots += lots
            else:
                exec_price = close * (1.0 - slip)
                if level is not None:
                    lots = (level * pf.lots) // cfg.amount_levels
                else:
                    lots = min(int(math.floor(quantity / lot + 1e-9)), pf.lots)
                if lots > 0:
                    gross = lots * lot * exec_price
                    fee = gross * cfg.fee_rate
                    pf.cash = pf.cash + gross - fee
                    pf.lots -= lots
        executed = kind if lots > 0 else HOLD
        if executed == HOLD:
            exec_price = close

        nw = mark_to_market(pf, close)
        self.networth_history.append(nw)
        reward = omega_reward(self.networth_history, cfg)
        self.cursor += 1
        self.done = self.cursor >= len(self.closes)
        info = {
            "step": t,
            "timestamp": int(self.timestamps[t]),
            "close": close,
            "requested_kind": kind,
            "action_kind": executed,
            "level": level if level is not None else 0,
            "exec_price": exec_price,
            "quantity": lots * lot,
            "fee": fee,
            "cash_before": cash_before,
            "cash": pf.cash,
            "holdings": pf.holdings,
            "net_worth": nw,
            "reward": reward,
        }
        self.trace.append({k: info[k] for k in TRACE_COLUMNS})
        return StepResult(self._observation(), reward, self.done, info)


# ---------------------------------------------------------------------------
# Trace CSV
# ---------------------------------------------------------------------------

def write_trace(rows: Sequence[dict], path: str | Path, initial_cash: float) -> None:
    """Episode trace CSV; the first line echoes the starting capital."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# initial_cash = {initial_cash!r}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in rows:
            writer.writerow([
                r["step"], r["timestamp"], repr(float(r["close"])), r["action_kind"], r["level"],
                repr(float(r["exec_price"])), repr(float(r["quantity"])), repr(float(r["fee"])),
                repr(float(r["cash"])), repr(float(r["holdings"])), repr(float(r["net_worth"])),
                repr(float(r["reward"])),
            ])


def read_trace(path: str | Path) -> tuple[list[dict], float]:
    initial_cash = None
    with Path(path).open(newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            if key.strip() == "initial_cash":
                initial_cash = float(value)
        elif line:
            body.append(line)
    if initial_cash is None:
        raise ValueError(f"{path}: trace lacks an initial_cash echo")
    rows = []
    for rec in csv.DictReader(body):
        rows.append({
            "step": int(rec["step"]),
            "timestamp": int(rec["timestamp"]),
            "close": float(rec["close"]),
            "action_kind": rec["action_kind"],
            "level": int(rec["level"]),
            "exec_price": float(rec["exec_price"]),
            "quantity": float(rec["quantity"]),
            "fee": float(rec["fee"]),
            "cash": float(rec["cash"]),
            "holdings": float(rec["holdings"]),
            "net_worth": float(rec["net_worth"]),
            "reward": float(rec["reward"]),
        })
    return rows, initial_cash
