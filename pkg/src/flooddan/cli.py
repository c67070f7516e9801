"""
Command-line entry point: ``flooddan synth|pretrain|adapt|evaluate|fewshot|plot``.

Every command resolves one RunConfig (YAML file plus flag overrides), reads
its upstream artifacts from the run directory, writes its own artifacts and
finishes with an atomically written manifest under ``manifests/``.

Run directory layout::

    source.csv, target.csv
    checkpoints/stage1.ckpt, checkpoints/stage2.ckpt
    traces/pretrain.jsonl, traces/adapt.jsonl
    alignment/before.csv, alignment/after.csv, alignment/summary.json
    reports/*.json, predictions/flooddan.csv
    fewshot/hours_<h>.json, fewshot/equivalence.json
    figures/*.png, figures/results_report.md
    manifests/<command>.json
"""

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from . import charts
from .charts import HISTOGRAM_COLUMNS, require_columns
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_override, setup_logging
from .errors import ConfigurationError, DependencyError, FloodDANError, ParseError
from .evaluation import (
    SUPERVISED_VARIANTS,
    EquivalenceStatement,
    FewShotResult,
    export_alignment_histograms,
    export_prediction_trace,
    feature_alignment_stats,
    fewshot_run,
    lower_bound_baseline,
    predict,
    results_table,
    supervised_baseline,
    supervision_equivalence,
)
from .hydrodata import (
    HydroSeries,
    Normalizer,
    WindowSet,
    fit_normalizer,
    load_series,
    make_windows,
    save_series,
    split_chronological,
)
from .io import append_jsonl, file_digest, git_describe, load_csv, read_json, read_jsonl, write_json
from .metrics import MetricsReport, ModelIdentity
from .models import ModelBundle, init_target_encoder
from .report import generate_report
from .synthetic import generate_synthetic
from .training import EpochRecord, adapt, as_tensors, encode, pretrain

logger = logging.getLogger(__name__)

STAGE1 = "checkpoints/stage1.ckpt"
STAGE2 = "checkpoints/stage2.ckpt"
FLOODDAN_REPORT = "reports/flooddan.json"


# ── Manifest ───────────────────────────────────────────────────────────────
@dataclass
class RunManifest:
    command: str
    cfg: RunConfig
    inputs: dict[str, Path] = field(default_factory=dict)
    outputs: dict[str, Path] = field(default_factory=dict)
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def add_input(self, name: str, path: Path) -> Path:
        self.inputs[name] = Path(path)
        return Path(path)

    def add_output(self, name: str, path: Path) -> Path:
        self.outputs[name] = Path(path)
        return Path(path)

    def write(self) -> Path:
        """Written last; every output it names must exist."""
        missing = [str(p) for p in self.outputs.values() if not p.exists()]
        if missing:
            raise DependencyError(f"manifest outputs missing: {', '.join(missing)}", path=missing[0])
        payload = {
            "command": self.command,
            "config": self.cfg.to_dict(),
            "config_digest": self.cfg.digest(),
            "seed": self.cfg.seed,
            "version": git_describe(),
            "started_at": self.started_at,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "inputs": {k: str(v) for k, v in sorted(self.inputs.items())},
            "outputs": {
                k: {"path": str(v), "sha256": file_digest(v)} for k, v in sorted(self.outputs.items())
            },
        }
        return write_json(payload, self.cfg.out_path / "manifests" / f"{self.command}.json")


def _require_file(path: Path, hint: str) -> Path:
    if not Path(path).exists():
        raise DependencyError(f"missing upstream artifact {path} (run `flooddan {hint}` first)",
                              path=path)
    return Path(path)


# ── Data preparation ───────────────────────────────────────────────────────
@dataclass
class PreparedData:
    source_normalizer: Normalizer
    target_normalizer: Normalizer
    source_train: WindowSet
    source_test: WindowSet
    target_train: WindowSet
    target_test: WindowSet
    target_train_series: HydroSeries


def prepare_data(cfg: RunConfig, manifest: RunManifest | None = None) -> PreparedData:
    """Load both watersheds, split chronologically, normalize on the train splits, window."""
    windows = {}
    normalizers = {}
    train_series = {}
    for role, path in (("source", cfg.source_path()), ("target", cfg.target_path())):
        _require_file(path, "synth")
        if manifest is not None:
            manifest.add_input(role, path)
        series = load_series(path, cfg.data.schema, name=role)
        train, test = split_chronological(series, cfg.data.train_fraction, cfg.window)
        normalizer = fit_normalizer(train)
        normalizers[role] = normalizer
        train_series[role] = normalizer.apply(train)
        windows[role] = (
            make_windows(train_series[role], cfg.window),
            make_windows(normalizer.apply(test), cfg.window),
        )
    return PreparedData(
        source_normalizer=normalizers["source"],
        target_normalizer=normalizers["target"],
        source_train=windows["source"][0],
        source_test=windows["source"][1],
        target_train=windows["target"][0],
        target_test=windows["target"][1],
        target_train_series=train_series["target"],
    )


def _trace_writer(path: Path):
    path.unlink(missing_ok=True)

    def callback(stage: str, record: EpochRecord):
        append_jsonl({"stage": stage, **asdict(record)}, path)

    return callback


def _evenly(windows: WindowSet, count: int) -> WindowSet:
    if len(windows) <= count:
        return windows
    return windows.subset(np.linspace(0, len(windows) - 1, count).round().astype(int))


# ── Commands ───────────────────────────────────────────────────────────────
def cmd_synth(cfg: RunConfig) -> Path:
    manifest = RunManifest("synth", cfg)
    for role, synth_cfg, path in (
        ("source", cfg.synth_source, cfg.source_path()),
        ("target", cfg.synth_target, cfg.target_path()),
    ):
        series = generate_synthetic(synth_cfg)
        save_series(series, manifest.add_output(role, path), cfg.data.schema)
    return manifest.write()


def cmd_pretrain(cfg: RunConfig) -> Path:
    manifest = RunManifest("pretrain", cfg)
    data = prepare_data(cfg, manifest)
    trace_path = manifest.add_output("trace", cfg.out_path / "traces" / "pretrain.jsonl")
    encoder, head, trace = pretrain(data.source_train, cfg.train, cfg.arch,
                                    callback=_trace_writer(trace_path))
    bundle = ModelBundle(
        arch=cfg.arch,
        station_count=data.source_train.station_count,
        window_length=cfg.window.window_length,
        encoder=encoder,
        head=head,
        metadata={
            "stage": "pretrain",
            "seed": cfg.train.seed,
            "config_digest": cfg.digest(),
            "version": git_describe(),
            "normalizer": data.source_normalizer.to_dict(),
            "final_loss": trace.final.loss,
        },
    )
    save_checkpoint(bundle, manifest.add_output("stage1", cfg.out_path / STAGE1))
    return manifest.write()


def _load_stage1(cfg: RunConfig, data: PreparedData, manifest: RunManifest) -> ModelBundle:
    path = manifest.add_input("stage1", _require_file(cfg.out_path / STAGE1, "pretrain"))
    return load_checkpoint(path, station_count=data.source_train.station_count,
                           window_length=cfg.window.window_length, arch=cfg.arch)


def _features(encoder, windows: WindowSet) -> torch.Tensor:
    dtype = next(encoder.parameters()).dtype
    return encode(encoder, as_tensors(windows, dtype)[0])


def cmd_adapt(cfg: RunConfig) -> Path:
    if cfg.arch.joint:
        raise ConfigurationError("arch.joint: the joint encoder has no adaptation stage")
    manifest = RunManifest("adapt", cfg)
    data = prepare_data(cfg, manifest)
    stage1 = _load_stage1(cfg, data, manifest)

    # stage 2 sees target rainfall only
    target_unlabeled = make_windows(data.target_train_series, cfg.window, labeled=False)
    sample = cfg.evaluate.alignment_samples
    source_feats = _features(stage1.encoder, _evenly(data.source_test, sample))
    initial = init_target_encoder(stage1.encoder, data.target_train.station_count, cfg.arch,
                                  cfg.adapt.seed, cfg.adapt.warm_start)
    before = feature_alignment_stats(source_feats, _features(initial, _evenly(data.target_test, sample)),
                                     bins=cfg.evaluate.histogram_bins)

    trace_path = manifest.add_output("trace", cfg.out_path / "traces" / "adapt.jsonl")
    target_encoder, critic, trace = adapt(
        target_unlabeled, data.source_train, stage1.encoder, cfg.adapt, cfg.arch,
        probe=data.target_test, source_head=stage1.head,
        probe_normalizer=data.target_normalizer, callback=_trace_writer(trace_path),
    )
    after = feature_alignment_stats(source_feats,
                                    _features(target_encoder, _evenly(data.target_test, sample)),
                                    bins=cfg.evaluate.histogram_bins)
    logger.info("Alignment distance: %.4g before → %.4g after", before.distance, after.distance)

    alignment_dir = cfg.out_path / "alignment"
    export_alignment_histograms(before, manifest.add_output("hist_before", alignment_dir / "before.csv"))
    export_alignment_histograms(after, manifest.add_output("hist_after", alignment_dir / "after.csv"))
    write_json({"before": before.summary(), "after": after.summary()},
               manifest.add_output("alignment", alignment_dir / "summary.json"))

    bundle = ModelBundle(
        arch=cfg.arch,
        station_count=data.target_train.station_count,
        window_length=cfg.window.window_length,
        encoder=target_encoder,
        head=None,
        critic=critic,
        metadata={
            "stage": "adapt",
            "seed": cfg.adapt.seed,
            "config_digest": cfg.digest(),
            "version": git_describe(),
            "normalizer": data.target_normalizer.to_dict(),
            "source_checkpoint": file_digest(cfg.out_path / STAGE1),
            "audit_labels": cfg.adapt.audit_labels,
            "final_ratio": trace.final.ratio,
        },
    )
    save_checkpoint(bundle, manifest.add_output("stage2", cfg.out_path / STAGE2))
    return manifest.write()


def _write_report(report: MetricsReport, path: Path, manifest: RunManifest, name: str):
    write_json(report.to_dict(), manifest.add_output(name, path))


def cmd_evaluate(cfg: RunConfig) -> Path:
    manifest = RunManifest("evaluate", cfg)
    data = prepare_data(cfg, manifest)
    stage1 = _load_stage1(cfg, data, manifest)
    stage2_path = manifest.add_input("stage2", _require_file(cfg.out_path / STAGE2, "adapt"))
    stage2 = load_checkpoint(stage2_path, station_count=data.target_test.station_count,
                             window_length=cfg.window.window_length, arch=cfg.arch)
    normalizer = Normalizer.from_dict(stage2.metadata["normalizer"])
    digest = cfg.digest()
    reports_dir = cfg.out_path / "reports"

    predictions, report = predict(
        stage2.encoder, stage1.head, normalizer, data.target_test,
        ModelIdentity(stage="adapt", variant=f"flooddan+{cfg.arch.head_mode}"),
        seed=cfg.adapt.seed, config_digest=digest,
    )
    _write_report(report, cfg.out_path / FLOODDAN_REPORT, manifest, "flooddan")
    export_prediction_trace(normalizer.invert(data.target_test.y), predictions,
                            manifest.add_output("predictions", cfg.out_path / "predictions" / "flooddan.csv"))

    lower = lower_bound_baseline(data.target_test, normalizer, cfg.seed, digest)
    _write_report(lower, reports_dir / "lower_bound.json", manifest, "lower_bound")
    logger.info("FloodDAN DC=%.2f%% vs lower bound DC=%.2f%%", report.dc_percent, lower.dc_percent)

    if cfg.evaluate.supervised_reference:
        for variant in SUPERVISED_VARIANTS:
            sup = supervised_baseline(data.target_train, data.target_test, cfg.train, cfg.arch,
                                      data.target_normalizer, variant, config_digest=digest)
            _write_report(sup, reports_dir / f"supervised_{variant}.json", manifest,
                          f"supervised_{variant}")
    return manifest.write()


def cmd_fewshot(cfg: RunConfig) -> Path:
    manifest = RunManifest("fewshot", cfg)
    unsup_path = manifest.add_input("flooddan", _require_file(cfg.out_path / FLOODDAN_REPORT, "evaluate"))
    unsupervised = MetricsReport.from_dict(read_json(unsup_path))
    data = prepare_data(cfg, manifest)
    results = []
    for hours in sorted(cfg.fewshot.hours):
        result = fewshot_run(
            data.target_train, data.target_test, hours, cfg.train, cfg.arch, data.target_normalizer,
            repeats=cfg.fewshot.repeats, contiguous=cfg.fewshot.contiguous,
            config_digest=cfg.digest(),
        )
        write_json(result.to_dict(),
                   manifest.add_output(f"hours_{hours}", cfg.out_path / "fewshot" / f"hours_{hours}.json"))
        results.append(result)
    statement = supervision_equivalence(unsupervised, results)
    logger.info("Supervision equivalence: %s", statement.describe())
    write_json(statement.to_dict(),
               manifest.add_output("equivalence", cfg.out_path / "fewshot" / "equivalence.json"))
    return manifest.write()


def _load_table(path: Path, manifest: RunManifest, name: str):
    manifest.add_input(name, path)
    if not path.read_text().strip():
        raise ParseError(f"{path} is empty", line=1)
    return load_csv(path)


def _merged_reports(run_dirs: list[Path], manifest: RunManifest) -> list[MetricsReport]:
    """FloodDAN reports of sibling runs (other head modes) for the shared results table."""
    reports = []
    for k, run_dir in enumerate(run_dirs):
        path = _require_file(Path(run_dir) / FLOODDAN_REPORT, "evaluate")
        reports.append(MetricsReport.from_dict(read_json(manifest.add_input(f"merged_{k}", path))))
    return reports


def cmd_plot(cfg: RunConfig, predictions: Path | None = None, histograms: Path | None = None,
             trace: Path | None = None, fewshot_dir: Path | None = None,
             merge_runs: list[Path] | None = None) -> Path:
    """Parse every input first, then render each figure whose inputs exist and the markdown report."""
    manifest = RunManifest("plot", cfg)
    out = cfg.out_path
    figures_dir = out / "figures"
    explicit = {k for k, v in (("predictions", predictions), ("histograms", histograms),
                               ("trace", trace), ("fewshot", fewshot_dir)) if v is not None}
    predictions = Path(predictions or out / "predictions" / "flooddan.csv")
    histograms = Path(histograms or out / "alignment" / "after.csv")
    trace = Path(trace or out / "traces" / "adapt.jsonl")
    fewshot_dir = Path(fewshot_dir or out / "fewshot")

    def available(name: str, path: Path, hint: str) -> bool:
        if path.exists():
            return True
        if name in explicit:
            _require_file(path, hint)
        logger.warning("Skipping %s figure: %s not found", name, path)
        return False

    # ── load ──
    prediction_frame = hist_after = hist_before = trace_frame = None
    if available("predictions", predictions, "evaluate"):
        prediction_frame = _load_table(predictions, manifest, "predictions")
        require_columns(prediction_frame, ["truth", "prediction"], "prediction trace")
    if available("histograms", histograms, "adapt"):
        hist_after = _load_table(histograms, manifest, "histograms")
        require_columns(hist_after, HISTOGRAM_COLUMNS, "histogram table")
        before = histograms.with_name("before.csv")
        if before.exists():
            hist_before = _load_table(before, manifest, "histograms_before")
            require_columns(hist_before, HISTOGRAM_COLUMNS, "histogram table")
    if available("trace", trace, "adapt"):
        manifest.add_input("trace", trace)
        trace_frame = pd.DataFrame([r for r in read_jsonl(trace) if r.get("stage") == "adapt"])
        require_columns(trace_frame, ["epoch", "ratio", "critic_loss", "generator_loss"],
                        "adaptation trace")

    unsupervised = None
    if (out / FLOODDAN_REPORT).exists():
        unsupervised = MetricsReport.from_dict(read_json(manifest.add_input("flooddan", out / FLOODDAN_REPORT)))
    fewshot_results, equivalence = [], None
    if available("fewshot", fewshot_dir, "fewshot"):
        for path in sorted(fewshot_dir.glob("hours_*.json")):
            fewshot_results.append(FewShotResult.from_dict(read_json(manifest.add_input(path.stem, path))))
        eq_path = fewshot_dir / "equivalence.json"
        if eq_path.exists():
            payload = read_json(manifest.add_input("equivalence", eq_path))
            payload.pop("statement", None)
            equivalence = EquivalenceStatement(**payload)
    reports = [MetricsReport.from_dict(read_json(p)) for p in sorted((out / "reports").glob("*.json"))]
    reports += _merged_reports(merge_runs or [], manifest)
    alignment_path = out / "alignment" / "summary.json"
    alignment = read_json(alignment_path) if alignment_path.exists() else None

    # ── render ──
    figures = []
    if prediction_frame is not None:
        figures.append(charts.chart_prediction_trace(prediction_frame, figures_dir))
    if hist_after is not None:
        figures.append(charts.chart_feature_histograms(hist_after, figures_dir, "feature_histograms_after"))
    if hist_before is not None:
        figures.append(charts.chart_feature_histograms(hist_before, figures_dir, "feature_histograms_before"))
    if trace_frame is not None:
        figures.append(charts.chart_ratio_curve(trace_frame, figures_dir))
        figures.append(charts.chart_training_losses(trace_frame, figures_dir))
    if fewshot_results:
        figures.append(charts.chart_fewshot_curve(
            fewshot_results, figures_dir,
            unsupervised_dc=unsupervised.dc if unsupervised else None, equivalence=equivalence))

    if not figures:
        raise DependencyError(f"nothing to plot under {out}", path=out)
    for fig_path in figures:
        manifest.add_output(fig_path.stem, fig_path)

    report_path = generate_report(
        results_table(reports, fewshot_results, equivalence),
        figures_dir,
        run_info={
            "source": cfg.source_path().stem,
            "target": cfg.target_path().stem,
            "seed": cfg.seed,
            "config_digest": cfg.digest(),
            "version": git_describe(),
        },
        equivalence=equivalence,
        alignment=alignment,
        figures=figures,
    )
    manifest.add_output("report", report_path)
    return manifest.write()


# ── Argument parsing ───────────────────────────────────────────────────────
COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "fewshot": cmd_fewshot,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flooddan",
        description="Two-stage unsupervised domain adaptation for runoff forecasting",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="Master seed (seed)")
    common.add_argument("--out", type=Path, help="Run directory (out_dir)")
    common.add_argument("--source", type=Path, help="Source watershed CSV (data.source_path)")
    common.add_argument("--target", type=Path, help="Target watershed CSV (data.target_path)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override any config key; repeatable")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="Generate the synthetic source/target pair")
    for name, text in (("pretrain", "Stage 1: supervised pretraining on the source"),
                       ("evaluate", "Spliced inference, lower bound and supervised references")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--epochs", type=int, help="Training epochs (train.epochs)")
    p = sub.add_parser("adapt", parents=[common], help="Stage 2: adversarial alignment on the target")
    p.add_argument("--epochs", type=int, help="Adaptation epochs (adapt.epochs)")
    p.add_argument("--audit-labels", action="store_true", default=None,
                   help="Poison target labels with NaN before training (adapt.audit_labels)")
    p = sub.add_parser("fewshot", parents=[common], help="Few-shot sweep and supervision equivalence")
    p.add_argument("--epochs", type=int, help="Training epochs (train.epochs)")
    p.add_argument("--hours", type=int, nargs="+", help="Supervision hours (fewshot.hours)")
    p.add_argument("--repeats", type=int, help="Repeats per hour count (fewshot.repeats)")
    p = sub.add_parser("plot", parents=[common], help="Figures and the markdown report")
    p.add_argument("--predictions", type=Path, help="Prediction trace CSV")
    p.add_argument("--histograms", type=Path, help="Alignment histogram CSV")
    p.add_argument("--trace", type=Path, help="Adaptation trace JSONL")
    p.add_argument("--fewshot-dir", type=Path, help="Directory of few-shot results")
    p.add_argument("--merge-runs", type=Path, nargs="+", default=[], metavar="RUN_DIR",
                   help="Sibling run directories whose FloodDAN reports join the results table")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = dict(parse_override(item) for item in args.set)
    flag_keys = {
        "seed": args.seed,
        "out_dir": str(args.out) if args.out else None,
        "data.source_path": str(args.source) if args.source else None,
        "data.target_path": str(args.target) if args.target else None,
    }
    epochs = getattr(args, "epochs", None)
    if args.command == "adapt":
        flag_keys["adapt.epochs"] = epochs
        flag_keys["adapt.audit_labels"] = getattr(args, "audit_labels", None)
    else:
        flag_keys["train.epochs"] = epochs
    flag_keys["fewshot.hours"] = getattr(args, "hours", None)
    flag_keys["fewshot.repeats"] = getattr(args, "repeats", None)
    overrides.update({k: v for k, v in flag_keys.items() if v is not None})
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        logger.info("flooddan %s → %s (config %s)", args.command, cfg.out_path, cfg.digest()[:12])
        if args.command == "plot":
            manifest = cmd_plot(cfg, args.predictions, args.histograms, args.trace, args.fewshot_dir,
                                args.merge_runs)
        else:
            manifest = COMMANDS[args.command](cfg)
    except FloodDANError as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"error[io]: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.exception("%s failed unexpectedly", args.command)
        print(f"error[internal]: {exc}", file=sys.stderr)
        return 1
    logger.info("Manifest written to %s", manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
