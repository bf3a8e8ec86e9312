from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import numeric_grads, relative_error
from ppo_trader.nn.checkpoint import CheckpointError, dumps, load_params, loads, save_params
from ppo_trader.nn.forecaster import (
    GridSpace,
    LstmForecaster,
    PlateauTracker,
    TrainSchedule,
    baseline_forecasters,
    grid_search,
    train_forecaster,
    write_history,
)
from ppo_trader.nn.layers import (
    LstmState,
    ShapeError,
    dense_backward,
    dense_forward,
    dropout,
    exact_matmul,
    init_dense,
    init_lstm,
    lstm_cell_backward,
    lstm_cell_forward,
    lstm_sequence_backward,
    lstm_sequence_forward,
    mse,
    softmax,
    zeros_like_params,
)
from ppo_trader.nn.optim import AdamState, NonFiniteGradient, adam_step
from ppo_trader.data import make_windows


def _zero_lstm(in_dim, hidden):
    return {k: np.zeros_like(v) for k, v in init_lstm(in_dim, hidden, np.random.default_rng(0)).items()}


# -- LSTM cell ---------------------------------------------------------------

def test_lstm_zero_parameters_zero_state():
    state, _ = lstm_cell_forward(np.ones((1, 3)), LstmState.zeros(1, 2), _zero_lstm(3, 2))
    assert np.all(state.m == 0) and np.all(state.c == 0)


def test_lstm_single_unit_by_hand():
    prev = LstmState(np.zeros((1, 1)), np.ones((1, 1)))
    state, _ = lstm_cell_forward(np.zeros((1, 1)), prev, _zero_lstm(1, 1))
    assert state.c[0, 0] == 0.5
    assert state.m[0, 0] == pytest.approx(0.5 * math.tanh(0.5), abs=1e-15)


def test_lstm_peepholes_enter_gates():
    p = _zero_lstm(1, 1)
    p["p_f"][:] = 2.0
    prev = LstmState(np.zeros((1, 1)), np.ones((1, 1)))
    state, _ = lstm_cell_forward(np.zeros((1, 1)), prev, p)
    assert state.c[0, 0] == pytest.approx(1.0 / (1.0 + math.exp(-2.0)))
    p = _zero_lstm(1, 1)
    p["p_o"][:] = 3.0
    state, _ = lstm_cell_forward(np.zeros((1, 1)), prev, p)
    # output gate peeks at the new cell value c = 0.5
    assert state.m[0, 0] == pytest.approx(math.tanh(0.5) / (1.0 + math.exp(-1.5)))


def test_lstm_shape_errors():
    p = init_lstm(3, 2, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        lstm_cell_forward(np.ones((1, 4)), LstmState.zeros(1, 2), p)
    with pytest.raises(ShapeError):
        dense_forward(np.ones((2, 5)), init_dense(3, 2, np.random.default_rng(0)))


def _randomized_lstm(rng, in_dim, hidden):
    p = init_lstm(in_dim, hidden, rng)
    p["b"] = rng.normal(0, 0.5, p["b"].shape)
    return p


@pytest.mark.parametrize("seed", range(10))
def test_lstm_sequence_gradients(seed):
    rng = np.random.default_rng(seed)
    B, T, D, H = 2, 6, 3, 4
    p = _randomized_lstm(rng, D, H)
    xs = rng.normal(size=(B, T, D))
    s0 = LstmState(rng.normal(size=(B, H)) * 0.5, rng.normal(size=(B, H)) * 0.5)
    resets = np.zeros((B, T), dtype=bool)
    resets[1, 3] = True
    wm = rng.normal(size=(B, T, H))
    wc = rng.normal(size=(B, H))

    def loss():
        ms, fin, _ = lstm_sequence_forward(xs, s0, p, resets)
        return float(np.sum(ms * wm) + np.sum(fin.c * wc))

    ms, fin, caches = lstm_sequence_forward(xs, s0, p, resets)
    dxs, grads, dstate0 = lstm_sequence_backward(wm, caches, p, LstmState(np.zeros((B, H)), wc))
    assert relative_error(grads, numeric_grads(loss, p)) < 1e-4
    inputs = {"xs": xs, "m0": s0.m, "c0": s0.c}
    num = numeric_grads(loss, inputs)
    assert relative_error({"xs": dxs, "m0": dstate0.m, "c0": dstate0.c}, num) < 1e-4


def test_lstm_zero_upstream_gradient():
    rng = np.random.default_rng(0)
    p = init_lstm(2, 3, rng)
    ms, _, caches = lstm_sequence_forward(rng.normal(size=(2, 4, 2)), LstmState.zeros(2, 3), p)
    _, grads, _ = lstm_sequence_backward(np.zeros_like(ms), caches, p)
    assert all(np.all(g == 0) for g in grads.values())


def test_single_step_sequence_matches_cell_backward():
    rng = np.random.default_rng(1)
    p = _randomized_lstm(rng, 2, 3)
    x = rng.normal(size=(2, 1, 2))
    s0 = LstmState(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
    dm = rng.normal(size=(2, 1, 3))
    _, _, caches = lstm_sequence_forward(x, s0, p)
    dxs, g_seq, _ = lstm_sequence_backward(dm, caches, p)
    _, cache = lstm_cell_forward(x[:, 0], s0, p)
    g_cell = zeros_like_params(p)
    dx, _, _ = lstm_cell_backward(dm[:, 0], np.zeros((2, 3)), cache, p, g_cell)
    assert np.array_equal(dxs[:, 0], dx)
    assert all(np.array_equal(g_seq[k], g_cell[k]) for k in p)


def test_missing_cache_rejected():
    p = init_lstm(1, 2, np.random.default_rng(0))
    ms, _, caches = lstm_sequence_forward(np.ones((1, 3, 1)), LstmState.zeros(1, 2), p)
    with pytest.raises(ValueError):
        lstm_sequence_backward(ms, caches[:-1], p)


def test_exact_matmul_is_batch_invariant():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(64, 50)), rng.normal(size=(50, 200))
    full = exact_matmul(a, b)
    assert all(np.array_equal(full[i:i + 1], exact_matmul(a[i:i + 1], b)) for i in range(64))
    assert np.allclose(full, a @ b, rtol=1e-12, atol=1e-12)


# -- dense -------------------------------------------------------------------

def test_dense_identity_and_softmax():
    x = np.array([[1.0, -2.0, 3.0]])
    y, _ = dense_forward(x, {"W": np.eye(3), "b": np.zeros(3)})
    assert np.array_equal(y, x)
    y, _ = dense_forward(np.zeros((1, 3)), {"W": np.zeros((3, 3)), "b": np.zeros(3)}, "softmax")
    assert np.allclose(y, 1 / 3, rtol=0, atol=1e-16)


@pytest.mark.parametrize("activation", ["linear", "relu", "tanh", "sigmoid", "softmax"])
@pytest.mark.parametrize("seed", range(10))
def test_dense_gradients(activation, seed):
    rng = np.random.default_rng(seed)
    p = init_dense(4, 3, rng)
    p["b"] = rng.normal(size=3)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 3))

    def loss():
        return float(np.sum(dense_forward(x, p, activation)[0] * w))

    y, cache = dense_forward(x, p, activation)
    dx, grads = dense_backward(w, cache, p)
    assert relative_error(grads, numeric_grads(loss, p)) < 1e-4
    assert relative_error({"x": dx}, numeric_grads(loss, {"x": x})) < 1e-4


def test_softmax_is_distribution():
    z = np.random.default_rng(0).normal(0, 30, size=(100, 24))
    p = softmax(z)
    assert np.all(p > 0) or np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


# -- dropout, mse ------------------------------------------------------------

def test_dropout_modes():
    x = np.arange(10.0)
    assert dropout(x, 0.5, train=False)[0] is x
    assert np.array_equal(dropout(x, 0.0, train=True, rng=np.random.default_rng(0))[0], x)
    with pytest.raises(ValueError):
        dropout(x, 1.0, train=True, rng=np.random.default_rng(0))


def test_dropout_statistics():
    x = np.ones(100_000)
    out, _ = dropout(x, 0.2, train=True, rng=np.random.default_rng(0))
    assert abs(np.mean(out == 0) - 0.2) < 0.01
    assert abs(out.mean() - 1.0) < 0.02


def test_mse():
    assert mse([1, 2], [1, 2]) == 0.0
    assert mse([0, 0], [1, 1]) == 1.0
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=500), rng.normal(size=500)
    assert mse(a, b) == pytest.approx(sum((x - y) ** 2 for x, y in zip(a, b)) / 500, rel=1e-12)
    with pytest.raises(ValueError):
        mse([1], [1, 2])
    with pytest.raises(ValueError):
        mse([], [])


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState.for_params(p)
    adam_step(p, {"w": np.zeros(2)}, state, 0.1)
    assert np.array_equal(p["w"], [1.0, -2.0])
    assert np.all(state.first_moment["w"] == 0) and state.step_count == 1


def test_adam_first_step_is_sign():
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": np.array([0.3, -5.0, 2e-3])}, AdamState.for_params(p), 0.01)
    assert np.allclose(p["w"], [-0.01, 0.01, -0.01], rtol=1e-5)


def test_adam_converges_on_quadratic():
    # lr chosen so that momentum never overshoots the minimum within 100 steps
    A = np.diag(np.linspace(0.5, 2.0, 5))
    p = {"w": np.ones(5)}
    state = AdamState.for_params(p)
    losses = []
    for _ in range(101):
        w = p["w"]
        losses.append(float(w @ A @ w))
        adam_step(p, {"w": 2 * A @ w}, state, 0.017)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))
    assert losses[-1] < 1e-3 * losses[0]


def test_adam_rejects_non_finite():
    p = {"w": np.ones(2)}
    with pytest.raises(NonFiniteGradient):
        adam_step(p, {"w": np.array([1.0, np.nan])}, AdamState.for_params(p), 0.1)
    assert np.array_equal(p["w"], [1.0, 1.0])


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a.W": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "s": np.array(2.5)}
    save_params(params, tmp_path / "p.nnc")
    back = load_params(tmp_path / "p.nnc")
    assert back.keys() == params.keys()
    assert all(np.array_equal(back[k], params[k]) and back[k].shape == params[k].shape for k in params)


def test_checkpoint_corruption():
    blob = dumps({"w": np.ones(3)})
    with pytest.raises(CheckpointError):
        loads(blob[:-1])
    with pytest.raises(CheckpointError):
        loads(blob + b"x")
    with pytest.raises(CheckpointError):
        loads(b"XXXX" + blob[4:])


# -- forecaster --------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_forecaster_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    model = LstmForecaster(hidden=3, layers=2, dropout_rate=0.0, seed=seed)
    for k in model.params:
        if k.endswith(".b"):
            model.params[k][:] = rng.normal(0, 0.3, model.params[k].shape)
    x, y = rng.normal(size=(4, 5)), rng.normal(size=4)
    _, grads = model.loss_and_grads(x, y)
    num = numeric_grads(lambda: model.loss_and_grads(x, y)[0], model.params)
    assert relative_error(grads, num) < 1e-4


def test_forecaster_dropout_gradients_with_fixed_masks():
    model = LstmForecaster(hidden=3, layers=2, dropout_rate=0.3, seed=0)
    x, y = np.random.default_rng(1).normal(size=(4, 5)), np.zeros(4)

    def loss():
        return model.loss_and_grads(x, y, train=True, rng=np.random.default_rng(7))[0]

    _, grads = model.loss_and_grads(x, y, train=True, rng=np.random.default_rng(7))
    assert relative_error(grads, numeric_grads(loss, model.params)) < 1e-4


class _StubModel:
    """Parameter-free model whose validation MSE follows a given sequence."""

    def __init__(self, valid_curve):
        self.params = {}
        self.window = None
        self._curve = list(valid_curve)
        self._epoch = 0

    def loss_and_grads(self, x, y, train=False, rng=None):
        return 0.0, {}

    def predict(self, x):
        value = self._curve[min(self._epoch, len(self._curve) - 1)]
        self._epoch += 1
        return np.full(len(x), math.sqrt(value))


def _tiny_split():
    x = np.zeros((4, 3))
    return (x, np.zeros(4)), (x, np.zeros(4))


def test_schedule_strict_improvement_runs_all_epochs():
    train, valid = _tiny_split()
    res = train_forecaster(_StubModel([1.0 / e for e in range(1, 301)]), train, valid)
    assert len(res.history) == 300 and res.lr_reductions == [] and res.best_epoch == 300


def test_schedule_constant_valid_loss():
    train, valid = _tiny_split()
    res = train_forecaster(_StubModel([1.0] * 300), train, valid)
    assert res.lr_reductions == [6]
    assert res.stopped_epoch == 11
    assert [r.lr for r in res.history[5:7]] == [0.001, 0.001 * 0.2]


def test_plateau_tracker_reduces_every_patience():
    tr = PlateauTracker(TrainSchedule(lr_patience=2, stop_patience=5))
    stops = [tr.update(e, v) for e, v in enumerate([3.0, 3.0, 3.0, 3.0, 3.0, 3.0], 1)]
    assert tr.lr_reductions == [3, 5] and stops[-1] is True


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(lr_factor=1.0)
    with pytest.raises(ValueError):
        TrainSchedule(lr_patience=10, stop_patience=10)


def _sine_windows(n=400, period=25):
    v = np.sin(2 * np.pi * np.arange(n) / period)
    x, y = make_windows(v, 10)
    return (x[:250], y[:250]), (x[250:320], y[250:320]), (x[320:], y[320:])


def test_training_is_reproducible_and_restores_best(tmp_path):
    train, valid, _ = _sine_windows()
    sched = TrainSchedule(max_epochs=6, batch_size=32)
    a = train_forecaster(LstmForecaster(8, 2, 0.1, seed=3), train, valid, sched, seed=5)
    b = train_forecaster(LstmForecaster(8, 2, 0.1, seed=3), train, valid, sched, seed=5)
    assert [r.valid_mse for r in a.history] == [r.valid_mse for r in b.history]
    assert a.best_valid_mse == min(r.valid_mse for r in a.history)
    assert mse(a.model.predict(valid[0]), valid[1]) == a.best_valid_mse
    assert a.model.window == 10
    write_history(a.history, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_mse,valid_mse,lr"


def test_grid_search_single_point_and_ties():
    train, valid, _ = _sine_windows()
    space = GridSpace((32,), (4,), (0.1,))
    res = grid_search(train, valid, space, seed=0, layers=1, max_epochs=1)
    assert res.best == {"batch_size": 32, "hidden": 4, "dropout": 0.1}
    with pytest.raises(ValueError):
        grid_search(train, valid, GridSpace((), (4,), (0.1,)), layers=1, max_epochs=1)


@pytest.mark.parametrize("seed", range(5))
def test_grid_search_planted_optimum(seed):
    # A one-unit network cannot fit the sine nearly as well as a 16-unit one.
    train, valid, _ = _sine_windows(300)
    space = GridSpace((16,), (1, 16), (0.0,))
    res = grid_search(train, valid, space, seed=seed, layers=1, max_epochs=15, jobs=2)
    assert res.best["hidden"] == 16


def test_default_grid_matches_reported_space():
    combos = GridSpace().combinations()
    assert len(combos) == 100
    assert {"batch_size": 32, "hidden": 50, "dropout": 0.2} in combos


def test_baselines():
    x, y = make_windows(np.full(50, 3.0), 10)
    s = baseline_forecasters((x, y), (x, y))
    assert s.persistence == 0.0 and s.linear < 1e-15
    x, y = make_windows(np.arange(100.0), 10)
    s = baseline_forecasters((x[:60], y[:60]), (x[60:], y[60:]))
    assert s.persistence == 1.0 and s.linear < 1e-12
    rng = np.random.default_rng(0)
    walk = np.cumsum(rng.normal(size=3000))
    x, y = make_windows(walk, 10)
    s = baseline_forecasters((x[:2000], y[:2000]), (x[2000:], y[2000:]))
    assert s.linear > 0.9 * s.persistence


def test_forecaster_from_params():
    m = LstmForecaster(hidden=5, layers=3, seed=1)
    m2 = LstmForecaster.from_params(m.params, window=10)
    assert (m2.hidden, m2.layers, m2.window) == (5, 3, 10)
    x = np.random.default_rng(0).normal(size=(3, 10))
    assert np.array_equal(m.predict(x), m2.predict(x))
