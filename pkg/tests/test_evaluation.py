from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import torch

from conftest import hourly, random_windows
from flooddan.config import RunConfig, WindowConfig
from flooddan.errors import ConfigurationError, MetricError, SizeError
from flooddan.evaluation import (
    FewShotResult,
    feature_alignment_stats,
    fewshot_run,
    lower_bound_baseline,
    predict,
    results_table,
    supervised_baseline,
    supervision_equivalence,
)
from flooddan.hydrodata import (
    HydroSeries,
    Normalizer,
    fit_normalizer,
    make_windows,
    split_chronological,
)
from flooddan.metrics import MetricsReport, ModelIdentity
from flooddan.models import init_bundle
from flooddan.synthetic import generate_synthetic


def _normalizer(d: int, runoff_max: float = 50.0) -> Normalizer:
    return Normalizer(minima=np.zeros(d + 1), maxima=np.r_[np.ones(d), runoff_max])


def _zeroed(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def _report(dc: float, stage: str, variant: str, hours: int = 0) -> MetricsReport:
    return MetricsReport(mse=1.0, dc=dc, n=10, model=ModelIdentity(stage, variant, hours),
                         dataset="t", seed=0)


# ── predict and baselines ──────────────────────────────────────────────────
def test_zero_residual_head_matches_lower_bound(tiny_arch):
    windows = random_windows(64, 2, 8, seed=3)
    bundle = init_bundle(replace(tiny_arch, head_mode="residual"), 2, 8, seed=0)
    _zeroed(bundle.head)
    normalizer = _normalizer(2)
    predictions, report = predict(bundle.encoder, bundle.head, normalizer, windows,
                                  ModelIdentity("adapt", "flooddan+residual"))
    baseline = lower_bound_baseline(windows, normalizer)
    np.testing.assert_array_equal(predictions, normalizer.invert(windows.y_history[:, -1]))
    assert report.mse == baseline.mse
    assert report.dc == baseline.dc


def test_lower_bound_on_ramp_is_horizon_squared():
    slope, T, t, L = 0.5, 8, 3, 60
    series = HydroSeries(name="ramp", rainfall=np.zeros((L, 1)),
                         runoff=10.0 + slope * np.arange(L), timestamps=hourly(L))
    normalizer = fit_normalizer(series)
    windows = make_windows(normalizer.apply(series), WindowConfig(T, t))
    report = lower_bound_baseline(windows, normalizer)
    assert report.mse == pytest.approx((t * slope) ** 2)
    assert report.model.variant == "lower_bound"


def test_constant_target_runoff_is_metric_error():
    windows = random_windows(20, 1, 8)
    windows = replace(windows, y=np.full(20, 0.3))
    with pytest.raises(MetricError):
        lower_bound_baseline(windows, _normalizer(1))


def test_predict_reports_original_units(tiny_arch):
    windows = random_windows(32, 2, 8, seed=1)
    bundle = init_bundle(tiny_arch, 2, 8, seed=0)
    small, _ = predict(bundle.encoder, bundle.head, _normalizer(2, 1.0), windows,
                       ModelIdentity("pretrain", "x"))
    large, report = predict(bundle.encoder, bundle.head, _normalizer(2, 100.0), windows,
                            ModelIdentity("pretrain", "x"))
    np.testing.assert_allclose(large, 100.0 * small, rtol=1e-9)
    assert report.n == 32


def test_predict_station_mismatch_is_configuration_error(tiny_arch):
    bundle = init_bundle(tiny_arch, 3, 8, seed=0)
    with pytest.raises(ConfigurationError, match="stations"):
        predict(bundle.encoder, bundle.head, _normalizer(2), random_windows(8, 2, 8),
                ModelIdentity("adapt", "x"))


def test_supervised_baseline_records_hours_and_loss(tiny_arch, quick_train):
    train, test = random_windows(48, 2, 8, seed=1), random_windows(16, 2, 8, seed=2)
    report = supervised_baseline(train, test, quick_train, tiny_arch, _normalizer(2))
    assert report.model.supervision_hours == 48
    assert report.model.stage == "supervised"
    assert np.isfinite(report.extra["final_train_loss"])


def test_joint_variant_scores(tiny_arch, quick_train):
    train, test = random_windows(48, 2, 8, seed=1), random_windows(16, 2, 8, seed=2)
    report = supervised_baseline(train, test, quick_train, tiny_arch, _normalizer(2),
                                 variant="joint_encoder")
    assert report.model.variant == "joint_encoder"
    assert np.isfinite(report.dc)


def test_unknown_variant_rejected(tiny_arch, quick_train):
    with pytest.raises(ConfigurationError):
        supervised_baseline(random_windows(8, 1, 8), random_windows(8, 1, 8), quick_train,
                            tiny_arch, _normalizer(1), variant="transformer")


# ── few-shot ───────────────────────────────────────────────────────────────
@pytest.mark.parametrize("hours", [0, 49])
def test_fewshot_hours_out_of_range(hours, tiny_arch, quick_train):
    with pytest.raises(SizeError):
        fewshot_run(random_windows(48, 1, 8), random_windows(8, 1, 8), hours, quick_train,
                    tiny_arch, _normalizer(1), repeats=1)


def test_fewshot_with_all_hours_matches_supervised(tiny_arch, quick_train):
    train, test = random_windows(40, 2, 8, seed=1), random_windows(16, 2, 8, seed=2)
    result = fewshot_run(train, test, 40, quick_train, tiny_arch, _normalizer(2), repeats=1)
    supervised = supervised_baseline(train, test, quick_train, tiny_arch, _normalizer(2))
    assert result.dc == (supervised.dc,)
    assert result.mse == (supervised.mse,)


def test_fewshot_repeats_vary(tiny_arch, quick_train):
    train, test = random_windows(80, 2, 8, seed=1), random_windows(16, 2, 8, seed=2)
    result = fewshot_run(train, test, 10, quick_train, tiny_arch, _normalizer(2), repeats=3)
    assert result.repeats == 3
    assert result.std_dc > 0


def test_fewshot_is_reproducible(tiny_arch, quick_train):
    train, test = random_windows(60, 2, 8, seed=1), random_windows(16, 2, 8, seed=2)
    a = fewshot_run(train, test, 15, quick_train, tiny_arch, _normalizer(2), repeats=2)
    b = fewshot_run(train, test, 15, quick_train, tiny_arch, _normalizer(2), repeats=2)
    assert a == b


@pytest.mark.slow
def test_fewshot_mean_dc_rises_with_hours():
    cfg = RunConfig()
    train, test = split_chronological(generate_synthetic(cfg.synth_target),
                                      cfg.data.train_fraction, cfg.window)
    normalizer = fit_normalizer(train)
    train_windows = make_windows(normalizer.apply(train), cfg.window)
    test_windows = make_windows(normalizer.apply(test), cfg.window)
    means = [
        fewshot_run(train_windows, test_windows, hours, cfg.train, cfg.arch, normalizer,
                    repeats=5).mean_dc
        for hours in (50, 100, 200, 400)
    ]
    inversions = sum(later < earlier for earlier, later in zip(means, means[1:]))
    assert inversions <= 1


def test_fewshot_result_dict_round_trip():
    result = FewShotResult(hours=50, mse=(1.0, 3.0), dc=(0.5, 0.7), seed=4, config_digest="z")
    payload = result.to_dict()
    assert payload["mean_dc"] == pytest.approx(0.6)
    assert FewShotResult.from_dict(payload) == result


# ── alignment ──────────────────────────────────────────────────────────────
def test_identical_features_have_zero_distance():
    features = np.random.default_rng(0).normal(size=(40, 3, 4))
    stats = feature_alignment_stats(features, features.copy())
    assert stats.distance == 0.0
    assert stats.mean_gap.max() == 0.0


def test_constant_shift_gives_mean_term_only():
    rng = np.random.default_rng(0)
    features = rng.normal(size=(50, 3, 4))
    c = 0.25
    stats = feature_alignment_stats(features, features + c)
    assert stats.mean_term == pytest.approx(12 * c ** 2)
    assert stats.cov_term == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(stats.mean_gap, c)


def test_distance_is_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(30, 2, 4)), rng.gamma(2.0, size=(25, 2, 4))
    assert feature_alignment_stats(a, b).distance == pytest.approx(
        feature_alignment_stats(b, a).distance)


def test_alignment_accepts_tensors_and_tabulates_histograms():
    stats = feature_alignment_stats(torch.rand(10, 2, 3), torch.rand(12, 2, 3), bins=5)
    hist = stats.histograms
    assert list(hist.columns) == ["domain", "bin_left", "bin_right", "count", "density"]
    assert hist.groupby("domain")["count"].sum().to_dict() == {"source": 60, "target": 72}


def test_alignment_shape_mismatch():
    with pytest.raises(SizeError):
        feature_alignment_stats(np.zeros((3, 2, 4)), np.zeros((3, 2, 5)))


# ── supervision equivalence ────────────────────────────────────────────────
def _sweep(points):
    return [FewShotResult(hours=h, mse=(1.0,), dc=(d,)) for h, d in points]


def test_equivalence_brackets_unsupervised_dc():
    sweep = _sweep([(456, 0.6263), (485, 0.6312), (513, 0.6561)])
    statement = supervision_equivalence(0.6349, sweep)
    assert statement.status == "bracketed"
    assert (statement.low_hours, statement.high_hours) == (485, 513)
    assert 485 < statement.interpolated_hours < 513
    assert "485" in statement.describe() and "513" in statement.describe()


def test_equivalence_exact_match():
    statement = supervision_equivalence(0.6312, _sweep([(456, 0.6263), (485, 0.6312)]))
    assert statement.status == "exact"
    assert (statement.low_hours, statement.high_hours) == (485, 485)


def test_equivalence_below_range_has_no_interval():
    statement = supervision_equivalence(0.5, _sweep([(456, 0.6263), (485, 0.6312)]))
    assert statement.status == "below_range"
    assert not statement.in_range
    assert statement.low_hours is None and statement.high_hours is None


def test_equivalence_above_range():
    statement = supervision_equivalence(_report(0.9, "adapt", "flooddan+residual"),
                                        _sweep([(50, 0.3), (100, 0.5)]))
    assert statement.status == "above_range"


def test_equivalence_scans_in_ascending_hours():
    statement = supervision_equivalence(0.55, _sweep([(400, 0.5), (100, 0.5), (200, 0.6)]))
    assert (statement.low_hours, statement.high_hours) == (100, 200)


def test_equivalence_needs_results():
    with pytest.raises(SizeError):
        supervision_equivalence(0.5, [])


# ── results table ──────────────────────────────────────────────────────────
def test_results_table_orders_supervision_levels():
    reports = [
        _report(0.10, "baseline", "lower_bound"),
        _report(0.634, "adapt", "flooddan+residual"),
        _report(0.90, "supervised", "rainfall_encoder+residual", 30404),
    ]
    sweep = _sweep([(800, 0.7), (50, 0.3)])
    statement = supervision_equivalence(0.634, sweep)
    table = results_table(reports, sweep, statement)
    assert list(table["supervision"]) == ["Fully supervised", "Few-shot supervised",
                                          "Few-shot supervised", "Unsupervised", "None"]
    assert list(table.loc[table["supervision"] == "Few-shot supervised", "training_hours"]) == [50, 800]
    assert table.loc[3, "dc_percent"] == pytest.approx(63.4)
    assert table.loc[3, "equivalent_hours"] == statement.describe()
    assert table.loc[0, "equivalent_hours"] == ""


def test_results_table_without_equivalence():
    table = results_table([_report(0.5, "adapt", "flooddan+direct")])
    assert isinstance(table, pd.DataFrame)
    assert "equivalent_hours" not in table.columns
    assert table.loc[0, "model"] == "Rainfall Encoder (FloodDAN)"
