"""OHLCV ingestion and reversible preprocessing.

Everything here is a pure function over immutable inputs: candles are loaded,
close prices are differenced to remove trend, checked for a unit root, scaled
with min-max normalization fitted on the training split, and windowed into
(input, next value) pairs for the forecasters.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CANDLE_COLUMNS = ("timestamp", "open", "high", "low", "close", "volume")

# Dickey-Fuller tau, constant / no trend, asymptotic (MacKinnon 2010).
ADF_CRITICAL_VALUES = {"1%": -3.43035, "5%": -2.86154, "10%": -2.56677}


class DataError(ValueError):
    """Raised when input data cannot be ingested or transformed."""


@dataclass(frozen=True)
class Candle:
    timestamp: int
    open: float
    high: float
    low: float
    close: float
    volume: float

    def is_valid(self) -> bool:
        prices = (self.open, self.high, self.low, self.close, self.volume)
        if not all(math.isfinite(p) for p in prices):
            return False
        if min(self.open, self.high, self.low, self.close) <= 0 or self.volume < 0:
            return False
        return self.low <= self.open <= self.high and self.low <= self.close <= self.high


@dataclass(frozen=True)
class CandleSeries:
    """Strictly time-ordered candles plus the number of rows dropped on load."""

    candles: tuple[Candle, ...]
    dropped: int = 0

    def __post_init__(self) -> None:
        if not self.candles:
            raise DataError("candle series is empty")
        ts = [c.timestamp for c in self.candles]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError("candle timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.candles)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([c.timestamp for c in self.candles], dtype=np.int64)

    @property
    def close(self) -> np.ndarray:
        return np.array([c.close for c in self.candles], dtype=np.float64)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(c, name) for c in self.candles], dtype=np.float64)


@dataclass(frozen=True)
class DiffState:
    seed_value: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.seed_value):
            raise DataError("diff seed value must be finite")


@dataclass(frozen=True)
class NormalizationParams:
    origin_min: float
    origin_max: float
    y_min: float = 0.0
    y_max: float = 1.0

    def __post_init__(self) -> None:
        if not self.origin_max > self.origin_min:
            raise DataError(
                f"normalization needs origin_max > origin_min, got {self.origin_min}..{self.origin_max}"
            )
        if not self.y_max > self.y_min:
            raise DataError(f"normalization needs y_max > y_min, got {self.y_min}..{self.y_max}")


@dataclass(frozen=True)
class AdfResult:
    t_statistic: float
    critical_value_5pct: float
    lag_order: int
    nobs: int

    @property
    def reject_unit_root(self) -> bool:
        return self.t_statistic < self.critical_value_5pct


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    valid_fraction: float = 0.1
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        fracs = (self.train_fraction, self.valid_fraction, self.test_fraction)
        if not all(0.0 < f < 1.0 for f in fracs):
            raise DataError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {sum(fracs)!r}")


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _parse_row(row: dict[str, str]) -> Candle | None:
    try:
        return Candle(
            timestamp=int(row["timestamp"]),
            open=float(row["open"]),
            high=float(row["high"]),
            low=float(row["low"]),
            close=float(row["close"]),
            volume=float(row["volume"]),
        )
    except (TypeError, ValueError):
        return None


def load_candles(path: str | Path) -> CandleSeries:
    """Read a ``timestamp,open,high,low,close,volume`` CSV.

    Rows that fail to parse or break the OHLC invariants are dropped and
    counted; duplicated timestamps are rejected outright.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = [h.strip().lower() for h in (reader.fieldnames or [])]
            missing = [c for c in CANDLE_COLUMNS if c not in header]
            if missing:
                raise DataError(f"{path}: missing columns {missing}")
            reader.fieldnames = header
            raw = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    candles: list[Candle] = []
    dropped = 0
    for row in raw:
        candle = _parse_row(row)
        if candle is None or not candle.is_valid():
            dropped += 1
            continue
        candles.append(candle)
    if not candles:
        raise DataError(f"{path}: no valid rows ({dropped} dropped)")

    candles.sort(key=lambda c: c.timestamp)
    ts = [c.timestamp for c in candles]
    n_dup = sum(1 for a, b in zip(ts, ts[1:]) if a == b)
    if n_dup:
        raise DataError(f"{path}: {n_dup} duplicate timestamps")
    if dropped:
        logger.warning("%s: dropped %d invalid rows", path, dropped)
    return CandleSeries(tuple(candles), dropped=dropped)


def write_candles(series: CandleSeries | Iterable[Candle], path: str | Path) -> None:
    candles = series.candles if isinstance(series, CandleSeries) else tuple(series)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CANDLE_COLUMNS)
        for c in candles:
            writer.writerow([c.timestamp, repr(c.open), repr(c.high), repr(c.low), repr(c.close), repr(c.volume)])


def synthetic_candles(n: int = 1000, seed: int = 0, start_price: float = 30_000.0,
                      volatility: float = 0.002, interval: int = 60) -> CandleSeries:
    """Geometric random-walk candles for demos and tests."""
    rng = np.random.default_rng(seed)
    closes = start_price * np.exp(np.cumsum(rng.normal(0.0, volatility, n)))
    opens = np.concatenate(([start_price], closes[:-1]))
    spread = np.abs(rng.normal(0.0, volatility / 2, n)) * closes
    highs = np.maximum(opens, closes) + spread
    lows = np.minimum(opens, closes) - spread
    volume = rng.uniform(1.0, 10.0, n)
    return CandleSeries(tuple(
        Candle(1_600_000_000 + i * interval, float(o), float(h), float(lo), float(c), float(v))
        for i, (o, h, lo, c, v) in enumerate(zip(opens, highs, lows, closes, volume))
    ))


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def difference(values: Sequence[float]) -> tuple[np.ndarray, DiffState]:
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise DataError("difference needs a 1-d series of length >= 2")
    return np.diff(x), DiffState(float(x[0]))


def invert_difference(diffs: Sequence[float], state: DiffState) -> np.ndarray:
    d = np.asarray(diffs, dtype=np.float64).reshape(-1)
    # Sequential accumulation from the seed; each partial sum reproduces the
    # original value exactly whenever the forward subtraction was exact.
    return np.add.accumulate(np.concatenate(([state.seed_value], d)))


def fit_minmax(values: Sequence[float], y_min: float = 0.0, y_max: float = 1.0) -> NormalizationParams:
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise DataError("cannot fit normalization on an empty series")
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi == lo:
        raise DataError(f"cannot normalize a constant series (value {lo})")
    return NormalizationParams(lo, hi, float(y_min), float(y_max))


def apply_minmax(values: Sequence[float], params: NormalizationParams) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    scale = (params.y_max - params.y_min) / (params.origin_max - params.origin_min)
    return (x - params.origin_min) * scale + params.y_min


def minmax_normalize(
    values: Sequence[float], y_min: float = 0.0, y_max: float = 1.0
) -> tuple[np.ndarray, NormalizationParams]:
    params = fit_minmax(values, y_min, y_max)
    return apply_minmax(values, params), params


def denormalize(normalized: Sequence[float], params: NormalizationParams) -> np.ndarray:
    if params.y_max == params.y_min:
        raise DataError("degenerate normalization target range")
    y = np.asarray(normalized, dtype=np.float64)
    scale = (params.origin_max - params.origin_min) / (params.y_max - params.y_min)
    return (y - params.y_min) * scale + params.origin_min


def adf_test(values: Sequence[float], lag_order: int = 0) -> AdfResult:
    """Augmented Dickey-Fuller test with a constant and no trend.

    Regresses ``dy_t`` on ``[1, y_{t-1}, dy_{t-1}, ..., dy_{t-p}]`` by OLS and
    compares the t-ratio of the ``y_{t-1}`` coefficient with the 5% tau
    critical value.
    """
    y = np.asarray(values, dtype=np.float64)
    if lag_order < 0:
        raise DataError("lag_order must be non-negative")
    if y.size < 25 + lag_order:
        raise DataError(f"ADF needs at least {25 + lag_order} points, got {y.size}")

    dy = np.diff(y)
    p = lag_order
    target = dy[p:]
    cols = [np.ones_like(target), y[p:-1]]
    for i in range(1, p + 1):
        cols.append(dy[p - i : dy.size - i])
    X = np.column_stack(cols)
    nobs, k = X.shape

    xtx = X.T @ X
    if np.linalg.matrix_rank(xtx) < k:
        raise DataError("ADF regression matrix is singular")
    xtx_inv = np.linalg.inv(xtx)
    beta = xtx_inv @ (X.T @ target)
    resid = target - X @ beta
    sigma2 = float(resid @ resid) / (nobs - k)
    stderr = math.sqrt(sigma2 * xtx_inv[1, 1])
    if stderr == 0.0:
        raise DataError("ADF regression has zero residual variance")
    t_stat = float(beta[1]) / stderr
    return AdfResult(t_stat, ADF_CRITICAL_VALUES["5%"], p, nobs)


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = int(math.floor(spec.train_fraction * n))
    n_valid = int(math.floor(spec.valid_fraction * n))
    return n_train, n_valid, n - n_train - n_valid


def chronological_split(series: Sequence, spec: SplitSpec = SplitSpec()):
    """Contiguous train / valid / test parts, never shuffled."""
    n = len(series)
    if n < 10:
        raise DataError(f"need at least 10 points to split, got {n}")
    n_train, n_valid, _ = split_sizes(n, spec)
    a, b = n_train, n_train + n_valid
    return series[:a], series[a:b], series[b:]


def make_windows(values: Sequence[float], step: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Sliding windows of length ``step`` and the value that follows each.

    Returns ``(inputs, targets)`` with shapes ``(n - step, step)`` and
    ``(n - step,)``.
    """
    x = np.asarray(values, dtype=np.float64)
    if step < 1:
        raise DataError("window step must be >= 1")
    if x.size <= step:
        raise DataError(f"series of length {x.size} is too short for window {step}")
    inputs = np.lib.stride_tricks.sliding_window_view(x, step)[:-1].copy()
    return inputs, x[step:].copy()


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def write_series(path: str | Path, timestamps: Sequence[int], values: Sequence[float]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "value"])
        for ts, v in zip(timestamps, values):
            writer.writerow([int(ts), repr(float(v))])


def read_series(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    ts = np.array([int(r["timestamp"]) for r in rows], dtype=np.int64)
    vals = np.array([float(r["value"]) for r in rows], dtype=np.float64)
    return ts, vals


def write_sidecar(path: str | Path, diff_state: DiffState, norm: NormalizationParams, **extra) -> None:
    """Plain ``key = value`` file; floats use repr so they round-trip exactly."""
    items = {
        "seed_value": diff_state.seed_value,
        "origin_min": norm.origin_min,
        "origin_max": norm.origin_max,
        "y_min": norm.y_min,
        "y_max": norm.y_max,
        **extra,
    }
    lines = [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sidecar(path: str | Path) -> tuple[DiffState, NormalizationParams, dict[str, str]]:
    kv: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    state = DiffState(float(kv.pop("seed_value")))
    norm = NormalizationParams(
        float(kv.pop("origin_min")), float(kv.pop("origin_max")),
        float(kv.pop("y_min")), float(kv.pop("y_max")),
    )
    return state, norm, kv
