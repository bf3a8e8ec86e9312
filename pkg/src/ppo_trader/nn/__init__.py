from .checkpoint import load_params, save_params
from .forecaster import (
    BaselineScores,
    GridSpace,
    LstmForecaster,
    TrainSchedule,
    baseline_forecasters,
    grid_search,
    train_forecaster,
)
from .layers import LstmState, dense_forward, dropout, lstm_cell_forward, mse
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "BaselineScores", "GridSpace", "LstmForecaster", "LstmState",
    "TrainSchedule", "adam_step", "baseline_forecasters", "dense_forward", "dropout",
    "grid_search", "load_params", "lstm_cell_forward", "mse", "save_params",
    "train_forecaster",
]
