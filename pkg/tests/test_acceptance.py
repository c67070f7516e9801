"""
End-to-end behavior on the default synthetic pair (11 → 7 stations).

Runs the full pipeline for three seeds at the default configuration, so these
tests are marked slow and skipped unless selected with ``-m slow``.
"""

import pytest

from flooddan.checkpoint import load_checkpoint
from flooddan.cli import main, prepare_data
from flooddan.config import load_config
from flooddan.evaluation import lower_bound_baseline, predict
from flooddan.io import read_json, read_jsonl
from flooddan.metrics import ModelIdentity

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    out = {}
    for seed in SEEDS:
        run_dir = root / f"seed_{seed}"
        args = ["--out", str(run_dir), "--seed", str(seed)]
        for cmd in ("synth", "pretrain", "adapt", "evaluate"):
            assert main([cmd, *args]) == 0, f"{cmd} failed for seed {seed}"
        out[seed] = run_dir
    return out


def _dc(run_dir, name: str) -> float:
    return read_json(run_dir / "reports" / f"{name}.json")["dc"]


def test_stage1_beats_persistence_on_source(runs):
    run_dir = runs[0]
    cfg = load_config(overrides={"out_dir": str(run_dir)})
    data = prepare_data(cfg)
    stage1 = load_checkpoint(run_dir / "checkpoints" / "stage1.ckpt")
    _, report = predict(stage1.encoder, stage1.head, data.source_normalizer, data.source_test,
                        ModelIdentity("pretrain", "rainfall_encoder+residual"))
    lower = lower_bound_baseline(data.source_test, data.source_normalizer)
    assert report.dc >= 0.70
    assert report.dc > lower.dc


def test_adapted_model_sits_between_bounds(runs):
    holds = 0
    for run_dir in runs.values():
        supervised = _dc(run_dir, "supervised_rainfall_encoder+residual")
        adapted = _dc(run_dir, "flooddan")
        lower = _dc(run_dir, "lower_bound")
        holds += supervised >= adapted > lower and adapted - lower >= 0.03
    assert holds >= 2


def test_alignment_distance_decreases(runs):
    for run_dir in runs.values():
        summary = read_json(run_dir / "alignment" / "summary.json")
        assert summary["after"]["distance"] < summary["before"]["distance"]


def test_ratio_moves_toward_one(runs):
    holds = 0
    for run_dir in runs.values():
        records = read_jsonl(run_dir / "traces" / "adapt.jsonl")
        first, final = records[0]["ratio"], records[-1]["ratio"]
        holds += abs(final - 1.0) < abs(first - 1.0)
    assert holds >= 2


def test_fewshot_sweep_brackets_adapted_model(runs):
    run_dir = runs[0]
    assert main(["fewshot", "--out", str(run_dir), "--seed", "0"]) == 0
    statement = read_json(run_dir / "fewshot" / "equivalence.json")
    assert statement["status"] in ("bracketed", "exact")
    assert statement["low_hours"] <= statement["high_hours"]


def test_rerun_reproduces_reports(runs, tmp_path):
    args = ["--out", str(tmp_path), "--seed", "0"]
    for cmd in ("synth", "pretrain", "adapt", "evaluate"):
        assert main([cmd, *args]) == 0
    for name in ("flooddan", "lower_bound"):
        again = read_json(tmp_path / "reports" / f"{name}.json")
        first = read_json(runs[0] / "reports" / f"{name}.json")
        assert {k: again[k] for k in ("mse", "dc", "n", "model")} == {
            k: first[k] for k in ("mse", "dc", "n", "model")}
