"""
Watershed time series: loading, validation, chronological split,
min-max normalization and sliding-window sample construction.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .config import SeriesSchema, WindowConfig
from .errors import ConfigurationError, DataError, IntegrityError, SchemaError, SizeError
from .io import load_csv, save_csv

logger = logging.getLogger(__name__)

HOUR = pd.Timedelta(hours=1)


@dataclass(frozen=True, eq=False)
class HydroSeries:
    """Aligned hourly rainfall matrix (L, d) in mm/h and runoff vector (L,) in m3/s."""

    name: str
    rainfall: np.ndarray
    runoff: np.ndarray
    timestamps: pd.DatetimeIndex
    normalized: bool = False

    def __post_init__(self):
        rainfall = np.asarray(self.rainfall, dtype=np.float64)
        runoff = np.asarray(self.runoff, dtype=np.float64)
        if rainfall.ndim != 2 or rainfall.shape[1] < 1:
            raise DataError(f"{self.name}: rainfall must be a (L, d) matrix with d >= 1")
        if runoff.ndim != 1:
            raise DataError(f"{self.name}: runoff must be a vector")
        if not (len(rainfall) == len(runoff) == len(self.timestamps)):
            raise DataError(
                f"{self.name}: rainfall rows ({len(rainfall)}), runoff length ({len(runoff)}) "
                f"and timestamp count ({len(self.timestamps)}) differ"
            )
        _check_values(rainfall, runoff, allow_negative=self.normalized, name=self.name)
        _check_hourly(pd.DatetimeIndex(self.timestamps), self.name)
        object.__setattr__(self, "rainfall", rainfall)
        object.__setattr__(self, "runoff", runoff)
        object.__setattr__(self, "timestamps", pd.DatetimeIndex(self.timestamps))

    @property
    def station_count(self) -> int:
        return self.rainfall.shape[1]

    def __len__(self) -> int:
        return len(self.runoff)

    def slice(self, start: int, stop: int) -> "HydroSeries":
        return replace(
            self,
            rainfall=self.rainfall[start:stop],
            runoff=self.runoff[start:stop],
            timestamps=self.timestamps[start:stop],
        )

    def to_frame(self, schema: SeriesSchema | None = None) -> pd.DataFrame:
        schema = schema or SeriesSchema()
        columns = rainfall_columns(schema, self.station_count)
        df = pd.DataFrame(self.rainfall, columns=columns)
        df.insert(0, schema.timestamp, self.timestamps.strftime("%Y-%m-%dT%H:%M:%S"))
        df[schema.runoff] = self.runoff
        return df


def rainfall_columns(schema: SeriesSchema, station_count: int) -> list[str]:
    if schema.rainfall is not None:
        if len(schema.rainfall) != station_count:
            raise SchemaError(
                f"schema lists {len(schema.rainfall)} rainfall columns, series has {station_count}"
            )
        return list(schema.rainfall)
    return [f"{schema.rainfall_prefix}{i:02d}" for i in range(1, station_count + 1)]


def _check_values(rainfall: np.ndarray, runoff: np.ndarray, allow_negative: bool, name: str,
                  row_labels: np.ndarray | None = None):
    bad = ~np.isfinite(rainfall).all(axis=1) | ~np.isfinite(runoff)
    if not allow_negative:
        bad |= (rainfall < 0).any(axis=1) | (runoff < 0)
    if bad.any():
        pos = int(np.flatnonzero(bad)[0])
        row = int(row_labels[pos]) if row_labels is not None else pos
        raise DataError(f"{name}: negative or non-finite value at row {row}")


def _check_hourly(timestamps: pd.DatetimeIndex, name: str):
    if len(timestamps) < 2:
        return
    steps = timestamps[1:] - timestamps[:-1]
    off = np.flatnonzero(steps != HOUR)
    if len(off):
        instant = timestamps[off[0] + 1]
        kind = "duplicate timestamp" if steps[off[0]] == pd.Timedelta(0) else "non-hourly step"
        raise IntegrityError(f"{name}: {kind} at {instant.isoformat()}")


# ── Loading ────────────────────────────────────────────────────────────────
def load_series(path: Path, schema: SeriesSchema | None = None, name: str | None = None) -> HydroSeries:
    """
    Load and validate one watershed CSV.

    Rows are returned in timestamp order regardless of file order. Reported
    row numbers are 0-based data-row positions in the file.
    """
    schema = schema or SeriesSchema()
    path = Path(path)
    name = name or path.stem
    df = load_csv(path)

    if schema.rainfall is not None:
        rain_cols = list(schema.rainfall)
    else:
        rain_cols = [c for c in df.columns if str(c).startswith(schema.rainfall_prefix)]
    if not rain_cols:
        raise SchemaError(f"{name}: no rainfall column matches prefix '{schema.rainfall_prefix}'")
    for col in [schema.timestamp, *rain_cols, schema.runoff]:
        if col not in df.columns:
            raise SchemaError(f"{name}: missing column '{col}'")

    rainfall = df[rain_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    runoff = pd.to_numeric(df[schema.runoff], errors="coerce").to_numpy(dtype=np.float64)
    _check_values(rainfall, runoff, allow_negative=False, name=name, row_labels=df.index.to_numpy())

    try:
        stamps = pd.to_datetime(df[schema.timestamp], format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise DataError(f"{name}: unparseable timestamp column '{schema.timestamp}': {exc}") from exc
    order = np.argsort(stamps.to_numpy(), kind="stable")
    timestamps = pd.DatetimeIndex(stamps.to_numpy()[order])

    series = HydroSeries(
        name=name,
        rainfall=rainfall[order],
        runoff=runoff[order],
        timestamps=timestamps,
    )
    logger.info("Series %s: L=%d, d=%d", name, len(series), series.station_count)
    return series


def save_series(series: HydroSeries, path: Path, schema: SeriesSchema | None = None) -> Path:
    return save_csv(series.to_frame(schema), path)


# ── Split ──────────────────────────────────────────────────────────────────
def split_chronological(
    series: HydroSeries,
    train_fraction: float,
    window: WindowConfig | None = None,
) -> tuple[HydroSeries, HydroSeries]:
    """Earliest ⌊fraction·L⌋ rows for training, the remainder for testing."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    cut = int(np.floor(train_fraction * len(series)))
    train, test = series.slice(0, cut), series.slice(cut, len(series))
    if window is not None:
        for label, part in (("test", test), ("train", train)):
            if len(part) <= window.span:
                raise SizeError(
                    f"{series.name}: {label} segment has {len(part)} rows, "
                    f"needs more than T + t = {window.span}"
                )
    return train, test


# ── Normalization ──────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-channel min-max scaling; channels are the rainfall stations followed by runoff."""

    minima: np.ndarray
    maxima: np.ndarray

    @property
    def station_count(self) -> int:
        return len(self.minima) - 1

    @property
    def _span(self) -> np.ndarray:
        return self.maxima - self.minima

    def _scale(self, values: np.ndarray, channels: slice | int) -> np.ndarray:
        lo, span = self.minima[channels], self._span[channels]
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (values - lo) / safe, 0.0)

    def apply(self, series: HydroSeries) -> HydroSeries:
        if series.station_count != self.station_count:
            raise ConfigurationError(
                f"normalizer fitted on {self.station_count} stations, series {series.name} has "
                f"{series.station_count}"
            )
        return replace(
            series,
            rainfall=self._scale(series.rainfall, slice(0, -1)),
            runoff=self._scale(series.runoff, -1),
            normalized=True,
        )

    def invert(self, values, channel: int = -1) -> np.ndarray:
        """Map normalized values back to original units; a constant channel returns its minimum."""
        values = np.asarray(values, dtype=np.float64)
        return values * self._span[channel] + self.minima[channel]

    def to_dict(self) -> dict:
        return {"minima": self.minima.tolist(), "maxima": self.maxima.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "Normalizer":
        return cls(minima=np.asarray(payload["minima"], dtype=np.float64),
                   maxima=np.asarray(payload["maxima"], dtype=np.float64))


def fit_normalizer(series: HydroSeries) -> Normalizer:
    """Fit on the training split only."""
    if series.normalized:
        raise ConfigurationError(f"{series.name}: cannot fit a normalizer on normalized data")
    values = np.column_stack([series.rainfall, series.runoff])
    return Normalizer(minima=values.min(axis=0), maxima=values.max(axis=0))


# ── Windows ────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class WindowedSample:
    x: np.ndarray
    y_history: np.ndarray
    y: float | None
    source_index: int


@dataclass(frozen=True, eq=False)
class WindowSet:
    """Array-backed batch of windows: x (N, d, T), y_history (N, T), y (N,) or None."""

    x: np.ndarray
    y_history: np.ndarray
    y: np.ndarray | None
    source_index: np.ndarray
    name: str = ""
    forecast_period: int = 0

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, k: int) -> WindowedSample:
        return WindowedSample(
            x=self.x[k],
            y_history=self.y_history[k],
            y=None if self.y is None else float(self.y[k]),
            source_index=int(self.source_index[k]),
        )

    def __iter__(self) -> Iterator[WindowedSample]:
        return (self[k] for k in range(len(self)))

    @property
    def labeled(self) -> bool:
        return self.y is not None

    @property
    def station_count(self) -> int:
        return self.x.shape[1]

    @property
    def window_length(self) -> int:
        return self.x.shape[2]

    def subset(self, indices) -> "WindowSet":
        indices = np.asarray(indices)
        return replace(
            self,
            x=self.x[indices],
            y_history=self.y_history[indices],
            y=None if self.y is None else self.y[indices],
            source_index=self.source_index[indices],
        )

    def with_poisoned_labels(self) -> "WindowSet":
        """Copy whose runoff arrays are all NaN; any use of them in a loss shows up as divergence."""
        return replace(
            self,
            y_history=np.full_like(self.y_history, np.nan),
            y=None if self.y is None else np.full_like(self.y, np.nan),
        )


def make_windows(series: HydroSeries, cfg: WindowConfig, labeled: bool = True) -> WindowSet:
    """Stride-1 windows; sample k covers rows k..k+T and targets runoff[k+T+t-1]."""
    T, t = cfg.window_length, cfg.forecast_period
    need = T + t if labeled else T
    if len(series) < need:
        raise SizeError(f"{series.name}: series of length {len(series)} shorter than minimum {need}")

    count = len(series) - need + 1
    x = sliding_window_view(series.rainfall, T, axis=0)[:count]
    y_history = sliding_window_view(series.runoff, T)[:count]
    y = series.runoff[T + t - 1:T + t - 1 + count].copy() if labeled else None
    return WindowSet(
        x=np.ascontiguousarray(x),
        y_history=np.ascontiguousarray(y_history),
        y=y,
        source_index=np.arange(count),
        name=series.name,
        forecast_period=t,
    )
