from dataclasses import replace

import numpy as np
import pytest

from conftest import small_synth
from flooddan.config import SyntheticConfig
from flooddan.errors import ConfigurationError
from flooddan.synthetic import generate_synthetic, synthetic_pair, unit_hydrograph


def test_no_storms_gives_constant_baseflow():
    cfg = SyntheticConfig(storm_rate=0.0, baseflow=10.0, noise=0.0, series_length=200)
    series = generate_synthetic(cfg)
    assert (series.rainfall == 0).all()
    np.testing.assert_array_equal(series.runoff, np.full(200, 10.0))


def test_same_seed_same_series():
    cfg = small_synth()
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    np.testing.assert_array_equal(a.rainfall, b.rainfall)
    np.testing.assert_array_equal(a.runoff, b.runoff)


def test_different_seed_different_series():
    a = generate_synthetic(small_synth(seed=1))
    b = generate_synthetic(small_synth(seed=2))
    assert not np.array_equal(a.rainfall, b.rainfall)


def test_doubling_intensity_never_lowers_runoff():
    cfg = small_synth(noise=0.0, series_length=1000)
    base = generate_synthetic(cfg)
    doubled = generate_synthetic(replace(cfg, intensity_scale=2 * cfg.intensity_scale))
    np.testing.assert_allclose(doubled.rainfall, 2 * base.rainfall)
    assert (doubled.runoff >= base.runoff - 1e-12).all()
    assert doubled.runoff.max() > base.runoff.max()


def test_values_finite_and_non_negative():
    series = generate_synthetic(small_synth(series_length=2000, noise=5.0, baseflow=0.0))
    assert np.isfinite(series.runoff).all() and (series.runoff >= 0).all()
    assert (series.rainfall >= 0).all()


def test_unit_hydrograph_is_causal_and_normalized():
    kernel = unit_hydrograph(time_constant=5.0, peak_delay=2)
    assert kernel.sum() == pytest.approx(1.0)
    assert (kernel[:2] == 0).all()
    assert kernel.argmax() == 2


def test_default_pair_station_counts():
    source, target = synthetic_pair(replace(small_synth(), station_count=11),
                                    replace(small_synth("target"), station_count=7))
    assert (source.station_count, target.station_count) == (11, 7)


def test_invalid_config_rejected():
    with pytest.raises(ConfigurationError, match="time_constant"):
        SyntheticConfig(time_constant=0.0)
