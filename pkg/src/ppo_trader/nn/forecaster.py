"""Stacked-LSTM next-value forecaster, its training loop and baselines."""

from __future__ import annotations

import copy
import csv
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .layers import (
    LstmState,
    Params,
    dense_backward,
    dense_forward,
    dropout,
    init_dense,
    init_lstm,
    lstm_sequence_backward,
    lstm_sequence_forward,
    mse,
    prefixed,
    subparams,
)
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)


class ForecasterDiverged(FloatingPointError):
    pass


class LstmForecaster:
    """``layers`` stacked LSTMs, ReLU + dropout between them, linear dense head.

    Inputs are windows of shape ``(B, T)`` (univariate) or ``(B, T, in)``;
    the prediction is read from the last hidden state of the top layer.
    """

    def __init__(self, hidden: int = 50, layers: int = 4, dropout_rate: float = 0.2,
                 input_dim: int = 1, seed: int = 0, params: Params | None = None):
        if layers < 1 or hidden < 1:
            raise ValueError("need at least one layer and one hidden unit")
        self.hidden = hidden
        self.layers = layers
        self.dropout_rate = dropout_rate
        self.input_dim = input_dim
        self.window: int | None = None  # input length the model was trained on
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for layer in range(layers):
                in_dim = input_dim if layer == 0 else hidden
                params.update(prefixed(f"lstm{layer}", init_lstm(in_dim, hidden, rng)))
            params.update(prefixed("out", init_dense(hidden, 1, rng)))
        self.params = params

    @classmethod
    def from_params(cls, params: Params, dropout_rate: float = 0.0,
                    window: int | None = None) -> "LstmForecaster":
        layers = sum(1 for k in params if k.startswith("lstm") and k.endswith(".Wx"))
        if layers == 0 or "out.W" not in params:
            raise ValueError("parameters do not describe a forecaster")
        input_dim, four_h = params["lstm0.Wx"].shape
        model = cls(four_h // 4, layers, dropout_rate, input_dim, params=params)
        model.window = window
        return model

    def _as_sequence(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[..., None]
        if x.ndim != 3 or x.shape[-1] != self.input_dim:
            raise ValueError(f"expected (B, T) or (B, T, {self.input_dim}) windows, got {x.shape}")
        return x

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None):
        h = self._as_sequence(x)
        B = h.shape[0]
        layer_caches = []
        for layer in range(self.layers):
            p = subparams(self.params, f"lstm{layer}")
            ms, _, caches = lstm_sequence_forward(h, LstmState.zeros(B, self.hidden), p)
            if layer < self.layers - 1:
                act = np.maximum(ms, 0.0)
                h, mask = dropout(act, self.dropout_rate, train, rng)
            else:
                mask = None
            layer_caches.append((ms, caches, mask))
        last, head_mask = dropout(layer_caches[-1][0][:, -1, :], self.dropout_rate, train, rng)
        out, dense_cache = dense_forward(last, subparams(self.params, "out"))
        return out[:, 0], (layer_caches, head_mask, dense_cache)

    def backward(self, dpred: np.ndarray, cache) -> Params:
        layer_caches, head_mask, dense_cache = cache
        dlast, g_out = dense_backward(dpred[:, None], dense_cache, subparams(self.params, "out"))
        grads = prefixed("out", g_out)
        if head_mask is not None:
            dlast = dlast * head_mask
        ms_top = layer_caches[-1][0]
        dms = np.zeros_like(ms_top)
        dms[:, -1, :] = dlast
        for layer in reversed(range(self.layers)):
            _, caches, _ = layer_caches[layer]
            dxs, g, _ = lstm_sequence_backward(dms, caches, subparams(self.params, f"lstm{layer}"))
            grads.update(prefixed(f"lstm{layer}", g))
            if layer > 0:
                ms_below, _, mask_below = layer_caches[layer - 1]
                if mask_below is not None:
                    dxs = dxs * mask_below
                dms = dxs * (ms_below > 0)
        return grads

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        outs = [self.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.empty(0)

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, train: bool = False,
                       rng: np.random.Generator | None = None) -> tuple[float, Params]:
        pred, cache = self.forward(x, train=train, rng=rng)
        diff = pred - np.asarray(y, dtype=np.float64)
        loss = float(np.mean(diff * diff))
        grads = self.backward(2.0 * diff / diff.size, cache)
        return loss, grads

    def copy(self) -> "LstmForecaster":
        return copy.deepcopy(self)


@dataclass
class TrainSchedule:
    initial_lr: float = 0.001
    max_epochs: int = 300
    lr_patience: int = 5
    lr_factor: float = 0.2
    stop_patience: int = 10
    batch_size: int = 32

    def __post_init__(self) -> None:
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must lie in (0, 1)")
        if not self.lr_patience < self.stop_patience:
            raise ValueError("lr_patience must be smaller than stop_patience")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")


class PlateauTracker:
    """Early-stopping bookkeeping on validation MSE.

    Every ``lr_patience`` epochs without a strict improvement the learning
    rate is multiplied by ``lr_factor``; after ``stop_patience`` such epochs
    training stops.
    """

    def __init__(self, schedule: TrainSchedule):
        self.schedule = schedule
        self.lr = schedule.initial_lr
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0
        self.lr_reductions: list[int] = []

    def update(self, epoch: int, valid_mse: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if valid_mse < self.best:
            self.best = valid_mse
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.schedule.stop_patience:
            return True
        if self.wait % self.schedule.lr_patience == 0:
            self.lr *= self.schedule.lr_factor
            self.lr_reductions.append(epoch)
        return False


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    valid_mse: float
    lr: float


@dataclass
class TrainResult:
    model: LstmForecaster
    history: list[EpochRecord]
    best_epoch: int
    best_valid_mse: float
    lr_reductions: list[int] = field(default_factory=list)

    @property
    def stopped_epoch(self) -> int:
        return self.history[-1].epoch


def train_forecaster(
    model: LstmForecaster,
    train: tuple[np.ndarray, np.ndarray],
    valid: tuple[np.ndarray, np.ndarray],
    schedule: TrainSchedule = TrainSchedule(),
    seed: int = 0,
) -> TrainResult:
    """Minimise MSE with Adam under the plateau schedule.

    The returned model carries the parameters of the best validation epoch.
    """
    x_tr, y_tr = (np.asarray(a, dtype=np.float64) for a in train)
    x_va, y_va = (np.asarray(a, dtype=np.float64) for a in valid)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("train and valid splits must be non-empty")
    model.window = int(x_tr.shape[1])
    rng = np.random.default_rng(seed)
    adam = AdamState.for_params(model.params)
    tracker = PlateauTracker(schedule)
    best_params = {k: v.copy() for k, v in model.params.items()}
    history: list[EpochRecord] = []

    for epoch in range(1, schedule.max_epochs + 1):
        lr = tracker.lr
        order = rng.permutation(len(x_tr))
        total = 0.0
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            loss, grads = model.loss_and_grads(x_tr[idx], y_tr[idx], train=True, rng=rng)
            if not math.isfinite(loss):
                raise ForecasterDiverged(f"non-finite training loss at epoch {epoch}")
            adam_step(model.params, grads, adam, lr)
            total += loss * len(idx)
        train_mse = total / len(order)
        valid_mse = mse(model.predict(x_va), y_va)
        if not math.isfinite(valid_mse):
            raise ForecasterDiverged(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochRecord(epoch, train_mse, valid_mse, lr))
        stop = tracker.update(epoch, valid_mse)
        if tracker.best_epoch == epoch:
            best_params = {k: v.copy() for k, v in model.params.items()}
        logger.debug("epoch %d train %.6g valid %.6g lr %.2g", epoch, train_mse, valid_mse, lr)
        if stop:
            break

    for k, v in best_params.items():
        model.params[k][...] = v
    return TrainResult(model, history, tracker.best_epoch, tracker.best, tracker.lr_reductions)


def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_mse", "valid_mse", "lr"])
        for r in history:
            writer.writerow([r.epoch, repr(r.train_mse), repr(r.valid_mse), repr(r.lr)])


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

@dataclass
class GridSpace:
    batch_sizes: Sequence[int] = (256, 128, 64, 32, 16)
    hidden_units: Sequence[int] = (200, 100, 50, 25)
    dropout_rates: Sequence[float] = (0.5, 0.4, 0.3, 0.2, 0.1)

    def combinations(self) -> list[dict]:
        return [
            {"batch_size": b, "hidden": h, "dropout": d}
            for b, h, d in itertools.product(self.batch_sizes, self.hidden_units, self.dropout_rates)
        ]


@dataclass
class GridResult:
    best: dict
    scores: list[tuple[dict, float]]


def grid_search(
    train: tuple[np.ndarray, np.ndarray],
    valid: tuple[np.ndarray, np.ndarray],
    space: GridSpace = GridSpace(),
    seed: int = 0,
    layers: int = 4,
    max_epochs: int = 60,
    schedule: TrainSchedule | None = None,
    jobs: int = 1,
) -> GridResult:
    """Train every combination and return the one with the lowest valid MSE.

    Ties go to the earlier combination in enumeration order.
    """
    combos = space.combinations()
    if not combos:
        raise ValueError("grid search space is empty")
    base = schedule or TrainSchedule()

    def run(combo: dict) -> float:
        sched = replace(base, max_epochs=max_epochs, batch_size=combo["batch_size"])
        model = LstmForecaster(hidden=combo["hidden"], layers=layers,
                               dropout_rate=combo["dropout"], seed=seed)
        return train_forecaster(model, train, valid, sched, seed=seed).best_valid_mse

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, combos))
    else:
        results = [run(c) for c in combos]
    scores = list(zip(combos, results))
    best_idx = min(range(len(scores)), key=lambda i: (scores[i][1], i))
    return GridResult(combos[best_idx], scores)


# ---------------------------------------------------------------------------
# Reference baselines
# ---------------------------------------------------------------------------

@dataclass
class BaselineScores:
    persistence: float
    linear: float
    ridge_fallback: bool = False
    coefficients: np.ndarray | None = None


def fit_linear(x: np.ndarray, y: np.ndarray, ridge: float = 1e-10) -> tuple[np.ndarray, bool]:
    """OLS with intercept via the normal equations; ridge if they are singular."""
    X = np.column_stack([np.ones(len(x)), x])
    xtx = X.T @ X
    used_ridge = False
    if np.linalg.matrix_rank(xtx) < xtx.shape[0]:
        used_ridge = True
        xtx = xtx + ridge * max(1.0, float(np.trace(xtx))) * np.eye(xtx.shape[0])
    coef = np.linalg.solve(xtx, X.T @ y)
    return coef, used_ridge


def baseline_forecasters(
    train: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
) -> BaselineScores:
    x_tr, y_tr = (np.asarray(a, dtype=np.float64) for a in train)
    x_te, y_te = (np.asarray(a, dtype=np.float64) for a in test)
    persistence = mse(x_te[:, -1], y_te)
    coef, used_ridge = fit_linear(x_tr, y_tr)
    if used_ridge:
        logger.warning("linear baseline: singular normal equations, used ridge fallback")
    pred = coef[0] + x_te @ coef[1:]
    return BaselineScores(persistence, mse(pred, y_te), used_ridge, coef)
