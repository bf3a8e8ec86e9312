from __future__ import annotations

import math

import numpy as np
import pytest

from ppo_trader.data import minmax_normalize
from ppo_trader.env import BUY, HOLD, SELL, EnvConfig, TradingEnv
from ppo_trader.report import profit_rate
from ppo_trader.strategies import (
    StrategyParams,
    buy_and_hold,
    cross_signal,
    forecast_prices,
    golden_death_cross,
    improved_momentum,
    log_moving_average,
    non_named,
    percent_changes,
    vma_oscillator,
)

FREE = EnvConfig(fee_rate=0.0, max_slippage=0.0)


class OracleForecaster:
    """Returns the true next normalized change, i.e. a perfect forecast."""

    def __init__(self, features, window=10):
        self.features = np.asarray(features)
        self.window = window
        self.calls = 0

    def predict(self, x):
        self.calls += 1
        return self.features[self.window:self.window + len(x)]


def _oracle_env(closes, config=FREE):
    closes = np.asarray(closes, dtype=np.float64)
    diffs = np.diff(closes, prepend=closes[0])
    if np.ptp(diffs) == 0:
        diffs[0] -= 1.0  # constant series still need a usable range
    feats, norm = minmax_normalize(diffs)
    env = TradingEnv(closes, config, features=feats)
    return env, OracleForecaster(feats), norm


def _walk(n=300, seed=0):
    rng = np.random.default_rng(seed)
    return 100.0 * np.exp(np.cumsum(rng.normal(0, 0.02, n)))


def _trades(trace, kind):
    return [(r["step"], r["quantity"]) for r in trace.rows if r["action_kind"] == kind]


# -- signals -----------------------------------------------------------------

def test_percent_changes_and_log_ma():
    c = percent_changes([100.0, 110.0, 99.0])
    assert math.isnan(c[0]) and c[1] == pytest.approx(10.0) and c[2] == pytest.approx(-10.0)
    lma = log_moving_average([1.0, math.e, math.e ** 2], 2)
    assert math.isnan(lma[0]) and lma[1] == pytest.approx(0.5) and lma[2] == pytest.approx(1.5)
    with pytest.raises(ValueError):
        log_moving_average([1.0, 0.0, 2.0], 2)


def test_cross_signal_oracle():
    closes = _walk(60, 3)
    r = cross_signal(closes)
    c = [(closes[t] / closes[t - 1] - 1) * 100 for t in range(1, 60)]
    c = [float("nan")] + c
    assert all(math.isnan(v) for v in r[:20])
    for t in range(20, 60):
        direct = sum(c[t - 4:t + 1]) / 5 - sum(c[t - 19:t + 1]) / 20
        assert abs(r[t] - direct) <= 1e-12


def test_params_validation():
    with pytest.raises(ValueError):
        StrategyParams(short_window=20, long_window=20)
    with pytest.raises(ValueError):
        StrategyParams(u_flat=0.0)


# -- rule-based strategies ---------------------------------------------------

def test_flat_prices_produce_no_trades():
    closes = np.full(120, 250.0)
    assert golden_death_cross(TradingEnv(closes)).n_trades == 0
    assert vma_oscillator(TradingEnv(closes)).n_trades == 0
    env, oracle, norm = _oracle_env(closes)
    assert improved_momentum(env, oracle, norm).n_trades == 0


def test_golden_cross_fixture():
    closes = np.full(80, 100.0)
    closes[39:] = 70.0
    closes[40:] = 109.9
    tr = golden_death_cross(TradingEnv(closes, FREE))
    assert _trades(tr, BUY) == [(44, 0.5)]


def test_golden_then_death_cross():
    closes = np.full(100, 100.0)
    closes[40:] = 160.0
    closes[60:] = 80.0
    tr = golden_death_cross(TradingEnv(closes, FREE))
    assert _trades(tr, BUY) == [(t, 0.375) for t in range(40, 45)]
    assert _trades(tr, SELL) == [(t, 0.375) for t in range(60, 65)]


def test_vma_rising_and_falling():
    up = np.linspace(100.0, 200.0, 120)
    tr = vma_oscillator(TradingEnv(up, FREE))
    assert [t for t, _ in _trades(tr, BUY)] == list(range(50, 119))
    assert all(q == 0.25 for _, q in _trades(tr, BUY))
    assert vma_oscillator(TradingEnv(up[::-1].copy(), FREE)).n_trades == 0


@pytest.mark.parametrize("seed", range(5))
def test_no_trades_before_warmup(seed):
    closes = _walk(300, seed) * np.exp(np.linspace(0, 0.5, 300))
    params = StrategyParams(r0=0.5)
    tr = golden_death_cross(TradingEnv(closes), params, seed=seed)
    assert all(r["step"] >= 20 for r in tr.rows if r["action_kind"] != HOLD)
    tr = vma_oscillator(TradingEnv(closes), seed=seed)
    assert tr.n_trades > 0
    assert all(r["step"] >= 50 for r in tr.rows if r["action_kind"] != HOLD)


@pytest.mark.parametrize("seed", range(5))
def test_profit_rate_recomputes_from_trace(seed):
    closes = _walk(300, seed)
    for tr in (buy_and_hold(TradingEnv(closes), seed), golden_death_cross(TradingEnv(closes), StrategyParams(r0=1.0), seed),
               vma_oscillator(TradingEnv(closes), seed=seed)):
        assert abs(profit_rate(tr.rows, tr.initial_cash) - tr.profit_rate) <= 1e-9
        assert tr.rows[-1]["holdings"] == 0


# -- buy and hold ------------------------------------------------------------

def test_buy_and_hold_doubling():
    closes = np.concatenate([np.full(11, 100.0), np.linspace(100.0, 200.0, 50)[1:]])
    tr = buy_and_hold(TradingEnv(closes, FREE))
    assert tr.profit_rate == pytest.approx(100.0, abs=1e-9)
    assert _trades(tr, BUY) == [(10, 100.0)]


def test_buy_and_hold_flat_and_fees():
    assert buy_and_hold(TradingEnv(np.full(40, 100.0), FREE)).profit_rate == 0.0
    tr = buy_and_hold(TradingEnv(np.full(40, 100.0), EnvConfig(max_slippage=0.0)))
    assert tr.profit_rate == pytest.approx(-0.5, abs=0.01)


# -- predictive strategies ---------------------------------------------------

def test_forecast_chain_with_oracle():
    closes = _walk(200, 1)
    env, oracle, norm = _oracle_env(closes)
    pred = forecast_prices(closes, env.features, oracle, norm, 10)
    assert oracle.calls == 1
    assert np.all(np.isnan(pred[:9])) and math.isnan(pred[-1])
    assert np.max(np.abs(pred[9:-1] - closes[10:])) <= 1e-9


def test_window_mismatch_raises():
    closes = _walk(100)
    env, oracle, norm = _oracle_env(closes)
    oracle.window = 20
    with pytest.raises(ValueError):
        improved_momentum(env, oracle, norm)


def test_improved_momentum_with_oracle():
    up = np.linspace(100.0, 150.0, 80)
    env, oracle, norm = _oracle_env(up)
    tr = improved_momentum(env, oracle, norm)
    assert [t for t, _ in _trades(tr, BUY)] == list(range(10, 79))
    env, oracle, norm = _oracle_env(up[::-1].copy())
    assert improved_momentum(env, oracle, norm).n_trades == 0


def test_non_named_variants():
    down = np.linspace(150.0, 100.0, 80)
    env, oracle, norm = _oracle_env(down)
    assert non_named(env, oracle, norm, "i").n_trades == 0

    up = np.linspace(100.0, 150.0, 80)
    env, oracle, norm = _oracle_env(up, EnvConfig())
    ii = non_named(env, oracle, norm, "ii", seed=3)
    bh = buy_and_hold(TradingEnv(up), seed=3)
    assert ii.name == "non_named_ii"
    assert ii.profit_rate == pytest.approx(bh.profit_rate, abs=1e-9)
    with pytest.raises(ValueError):
        non_named(env, oracle, norm, "iii")


def test_non_named_ii_sells_on_bearish_forecast():
    closes = np.concatenate([np.linspace(100.0, 120.0, 40), np.linspace(120.0, 90.0, 40)[1:]])
    env, oracle, norm = _oracle_env(closes)
    tr = non_named(env, oracle, norm, "ii")
    sells = _trades(tr, SELL)
    assert sells and sells[0][0] == 39
    assert not _trades(tr, BUY)[1:]
