"""Shared fixtures: small synthetic watersheds and tiny model configurations."""

import numpy as np
import pandas as pd
import pytest
import torch

from flooddan.config import ArchConfig, SyntheticConfig, TrainConfig, WindowConfig
from flooddan.hydrodata import HydroSeries, WindowSet
from flooddan.synthetic import generate_synthetic


@pytest.fixture
def tiny_arch() -> ArchConfig:
    return ArchConfig(channels=6, head_channels=6, critic_hidden=16, dropout=0.0)


@pytest.fixture
def window() -> WindowConfig:
    return WindowConfig(window_length=8, forecast_period=2)


@pytest.fixture
def quick_train() -> TrainConfig:
    return TrainConfig(epochs=3, batch_size=16, learning_rate=5e-3, weight_decay=0.0, seed=0)


def small_synth(name: str = "source", station_count: int = 3, series_length: int = 400,
                seed: int = 1, **kwargs) -> SyntheticConfig:
    return SyntheticConfig(name=name, station_count=station_count, series_length=series_length,
                           storm_rate=0.05, seed=seed, **kwargs)


@pytest.fixture
def source_series() -> HydroSeries:
    return generate_synthetic(small_synth("source", 3, 400, seed=1))


@pytest.fixture
def target_series() -> HydroSeries:
    return generate_synthetic(small_synth("target", 2, 300, seed=2, time_constant=4.0))


def random_windows(n: int, d: int, T: int, seed: int = 0, name: str = "random") -> WindowSet:
    rng = np.random.default_rng(seed)
    return WindowSet(
        x=rng.uniform(0, 1, size=(n, d, T)),
        y_history=rng.uniform(0, 1, size=(n, T)),
        y=rng.uniform(0, 1, size=n),
        source_index=np.arange(n),
        name=name,
        forecast_period=1,
    )


def hourly(n: int, start: str = "2020-01-01T00:00:00") -> pd.DatetimeIndex:
    return pd.date_range(start=start, periods=n, freq="h")


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield
