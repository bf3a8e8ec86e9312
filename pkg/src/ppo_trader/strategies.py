"""Rule-based benchmark strategies executed through the trading environment.

Every strategy walks the same :class:`~ppo_trader.env.TradingEnv` as the
agent, so fees, slippage and lot rounding apply identically. Open positions
are liquidated at the last step so profit rates are comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .data import NormalizationParams, denormalize
from .env import BUY, HOLD, SELL, DiscreteAction, TradingEnv, encode_action

# ShortMA vs LongMA comparisons tolerate summation rounding on flat prices.
MA_TOLERANCE = 1e-12

Order = tuple[str, float]
Decision = Callable[[int, TradingEnv], "Order | str | None"]
ALL_IN = "all_in"
ALL_OUT = "all_out"


@dataclass(frozen=True)
class StrategyParams:
    r0: float = 5.0
    u_cross: float = 0.05
    u_flat: float = 0.25
    n: int = 50
    short_window: int = 5
    long_window: int = 20
    forecast_window: int = 10

    def __post_init__(self) -> None:
        if min(self.r0, self.u_cross, self.u_flat) <= 0 or min(self.n, self.short_window) < 1:
            raise ValueError("strategy parameters must be positive")
        if self.short_window >= self.long_window:
            raise ValueError("short_window must be smaller than long_window")


@dataclass
class StrategyTrace:
    name: str
    rows: list[dict]
    profit_rate: float
    initial_cash: float

    @property
    def n_trades(self) -> int:
        return sum(1 for r in self.rows if r["action_kind"] != HOLD)


class Forecaster(Protocol):
    window: int | None

    def predict(self, x: np.ndarray) -> np.ndarray: ...


def run_rule(name: str, env: TradingEnv, decide: Decision, seed: int = 0) -> StrategyTrace:
    """Drive one episode with ``decide(t, env)``; the final step sells everything.

    ``decide`` returns ``(kind, quantity)``, :data:`ALL_IN`, :data:`ALL_OUT`
    or ``None`` for hold.
    """
    env.reset(seed=seed)
    last = len(env.closes) - 1
    levels = env.config.amount_levels
    while not env.done:
        t = env.cursor
        order = ALL_OUT if t == last else decide(t, env)
        if order == ALL_IN:
            env.step(encode_action(DiscreteAction(BUY, levels), levels))
        elif order == ALL_OUT:
            env.step(encode_action(DiscreteAction(SELL, levels), levels))
        elif order is None:
            env.step_quantity(HOLD, 0.0)
        else:
            env.step_quantity(*order)
    return StrategyTrace(name, list(env.trace), env.profit_rate, env.config.initial_cash)


def buy_and_hold(env: TradingEnv, seed: int = 0) -> StrategyTrace:
    first = env.first_step
    return run_rule("buy_and_hold", env, lambda t, _: ALL_IN if t == first else None, seed)


def percent_changes(closes: np.ndarray) -> np.ndarray:
    """``c[t] = (P_t / P_{t-1} - 1) * 100``; ``c[0]`` is NaN."""
    closes = np.asarray(closes, dtype=np.float64)
    out = np.full(len(closes), np.nan)
    out[1:] = (closes[1:] / closes[:-1] - 1.0) * 100.0
    return out


def cross_signal(closes: np.ndarray, params: StrategyParams = StrategyParams()) -> np.ndarray:
    """Short-window minus long-window mean percent change; NaN before ``long_window``."""
    c = percent_changes(closes)
    r = np.full(len(c), np.nan)
    s, l = params.short_window, params.long_window
    for t in range(l, len(c)):
        r[t] = np.mean(c[t - s + 1:t + 1]) - np.mean(c[t - l + 1:t + 1])
    return r


def golden_death_cross(env: TradingEnv, params: StrategyParams = StrategyParams(),
                       seed: int = 0) -> StrategyTrace:
    """Buy ``r * u_cross`` BTC when the short mean gain beats the long one by r > r0;
    sell the same way when the long mean beats the short one."""
    if len(env.closes) <= params.long_window:
        raise ValueError("price segment must be longer than long_window")
    r = cross_signal(env.closes, params)

    def decide(t, _):
        if math.isnan(r[t]):
            return None
        if r[t] > params.r0:
            return BUY, r[t] * params.u_cross
        if -r[t] > params.r0:
            return SELL, -r[t] * params.u_cross
        return None

    return run_rule("golden_death_cross", env, decide, seed)


def log_moving_average(closes: np.ndarray, n: int) -> np.ndarray:
    """Mean of ``log P`` over the last ``n`` prices; NaN until ``n`` are available."""
    closes = np.asarray(closes, dtype=np.float64)
    if np.any(closes <= 0):
        raise ValueError("log moving average needs positive prices")
    logs = np.log(closes)
    out = np.full(len(logs), np.nan)
    for t in range(n - 1, len(logs)):
        out[t] = np.mean(logs[t - n + 1:t + 1])
    return out


def vma_oscillator(env: TradingEnv, params: StrategyParams = StrategyParams(),
                   seed: int = 0) -> StrategyTrace:
    """Buy-only: ``u_flat`` BTC whenever log price sits above its n-period log mean."""
    n = params.n
    if len(env.closes) <= n:
        raise ValueError("price segment must be longer than n")
    long_ma = log_moving_average(env.closes, n)
    short_ma = np.log(env.closes)

    def decide(t, _):
        if t < n:
            return None
        if short_ma[t] - long_ma[t] > MA_TOLERANCE:
            return BUY, params.u_flat
        return None

    return run_rule("vma_oscillator", env, decide, seed)


def forecast_prices(closes: np.ndarray, features: np.ndarray, forecaster: Forecaster,
                    norm: NormalizationParams, window: int) -> np.ndarray:
    """Predicted ``P_{t+1}`` for every t that has a full feature window.

    ``features[t]`` is the normalized change into candle t. The forecaster is
    called once with the windows for t = window-1 .. len-2 in order; its
    normalized outputs are denormalized and added back onto ``closes[t]``.
    """
    if getattr(forecaster, "window", None) not in (None, window):
        raise ValueError(f"forecaster was trained on windows of {forecaster.window}, "
                         f"pipeline supplies {window}")
    closes = np.asarray(closes, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    out = np.full(len(closes), np.nan)
    ts = np.arange(window - 1, len(closes) - 1)
    if len(ts) == 0:
        return out
    windows = np.stack([features[t - window + 1:t + 1] for t in ts])
    pred = np.asarray(forecaster.predict(windows), dtype=np.float64).reshape(-1)
    if pred.shape != ts.shape:
        raise ValueError(f"forecaster returned {pred.shape[0]} predictions for {len(ts)} windows")
    out[ts] = closes[ts] + denormalize(pred, norm)
    return out


def _predictive(name: str, env: TradingEnv, predicted: np.ndarray, seed: int,
                on_up: "Order | None", on_down: "Order | None", opening=None) -> StrategyTrace:
    first = env.first_step

    def decide(t, e):
        if opening is not None and t == first:
            return opening
        p = predicted[t]
        if math.isnan(p):
            return None
        if p > e.closes[t]:
            return on_up
        if p < e.closes[t]:
            return on_down
        return None

    return run_rule(name, env, decide, seed)


def improved_momentum(env: TradingEnv, forecaster: Forecaster, norm: NormalizationParams,
                      params: StrategyParams = StrategyParams(), seed: int = 0) -> StrategyTrace:
    predicted = forecast_prices(env.closes, env.features, forecaster, norm, params.forecast_window)
    u = params.u_flat
    return _predictive("improved_momentum", env, predicted, seed, (BUY, u), (SELL, u))


def non_named(env: TradingEnv, forecaster: Forecaster, norm: NormalizationParams,
              variant: str = "i", params: StrategyParams = StrategyParams(),
              seed: int = 0) -> StrategyTrace:
    """Variant ``i`` starts in cash and only buys; ``ii`` starts all in and only sells."""
    predicted = forecast_prices(env.closes, env.features, forecaster, norm, params.forecast_window)
    u = params.u_flat
    if variant == "i":
        return _predictive("non_named_i", env, predicted, seed, (BUY, u), None)
    if variant == "ii":
        return _predictive("non_named_ii", env, predicted, seed, None, (SELL, u), opening=ALL_IN)
    raise ValueError(f"unknown variant {variant!r}; expected 'i' or 'ii'")
