#!/usr/bin/env python3
"""
End-to-end experiment runner.

Usage:
    python scripts/run_all.py --config configs/default.yaml
    python scripts/run_all.py --config configs/smoke.yaml --seeds 0 1 2
    python scripts/run_all.py --config configs/default.yaml --skip-synth --skip-fewshot
    python scripts/run_all.py --config configs/smoke.yaml --head-modes residual
"""

import argparse
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

# ── Setup ──────────────────────────────────────────────────────────────────
ROOT_DIR = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT_DIR / "src"))

from flooddan.cli import main as flooddan_main
from flooddan.config import load_config, setup_logging
from flooddan.io import git_describe, read_json

logger = logging.getLogger(__name__)

STEPS = ["synth", "pretrain", "adapt", "evaluate", "fewshot", "plot"]
VARIANT_STEPS = ["pretrain", "adapt", "evaluate"]
HEAD_MODES = ["residual", "direct"]


def write_run_log(output_dir: Path, start_time: float, args, step_times: dict, seed: int):
    """Write the pipeline run log next to the run's artifacts."""
    output_dir.mkdir(parents=True, exist_ok=True)
    log_path = output_dir / "run_log.txt"

    elapsed = time.time() - start_time
    now = datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC")

    lines = [
        "Pipeline Run Log",
        "================",
        f"Timestamp: {now}",
        f"Seed: {seed}",
        f"Git Version: {git_describe()}",
        f"Python Version: {sys.version}",
        f"Total Elapsed: {elapsed:.1f}s",
        "",
        "Arguments:",
        f"  --config {args.config}",
        f"  --skip-synth: {args.skip_synth}",
        f"  --skip-fewshot: {args.skip_fewshot}",
        f"  --head-modes: {' '.join(args.head_modes)}",
        "",
        "Step Timings:",
    ]
    for step, t in step_times.items():
        lines.append(f"  {step}: {t:.1f}s")

    lines.append("")
    lines.append("Reports:")
    for path in sorted((output_dir / "reports").glob("*.json")):
        report = read_json(path)
        lines.append(f"  {path.stem}: MSE={report['mse']:.4g} DC={report['dc_percent']:.2f}%")
    for path in sorted(output_dir.glob("heads/*/reports/flooddan.json")):
        report = read_json(path)
        lines.append(f"  flooddan ({path.parent.parent.name} head): MSE={report['mse']:.4g} "
                     f"DC={report['dc_percent']:.2f}%")
    equivalence = output_dir / "fewshot" / "equivalence.json"
    if equivalence.exists():
        lines.append(f"  equivalence: {read_json(equivalence)['statement']}")

    log_path.write_text("\n".join(lines) + "\n")
    logger.info("Run log written to %s", log_path)


def run_seed(args, seed: int) -> dict[str, int]:
    cfg = load_config(args.config, {"seed": seed})
    out_dir = cfg.out_path / f"seed_{seed}" if len(args.seeds) > 1 else cfg.out_path
    cfg = load_config(args.config, {"seed": seed, "out_dir": str(out_dir)})
    base = ["--config", str(args.config)] if args.config else []
    base += ["--seed", str(seed)]
    common = [*base, "--out", str(out_dir)]

    # other head modes share the watershed files and join the results table
    variants = {mode: out_dir / "heads" / mode
                for mode in dict.fromkeys(args.head_modes) if mode != cfg.arch.head_mode}
    variant_args = {
        mode: [*base, "--out", str(path), "--source", str(cfg.source_path()),
               "--target", str(cfg.target_path()), "--set", f"arch.head_mode={mode}",
               "--set", "evaluate.supervised_reference=false"]
        for mode, path in variants.items()
    }

    plan = [(step, [step, *common]) for step in STEPS[:4]]
    for mode, extra in variant_args.items():
        plan += [(f"{step} ({mode})", [step, *extra]) for step in VARIANT_STEPS]
    plan.append(("fewshot", ["fewshot", *common]))
    merge = ["--merge-runs", *map(str, variants.values())] if variants else []
    plan.append(("plot", ["plot", *common, *merge]))

    start_time = time.time()
    step_times, codes = {}, {}
    for step, argv in plan:
        if (step == "synth" and args.skip_synth) or (step == "fewshot" and args.skip_fewshot):
            logger.info("Skipping %s", step)
            continue
        t0 = time.time()
        logger.info("Running %s (seed %d) ...", step, seed)
        codes[step] = flooddan_main(argv)
        step_times[step] = time.time() - t0
        if codes[step] != 0:
            logger.error("Step %s failed with exit code %d", step, codes[step])
            if step != "plot":
                break

    write_run_log(out_dir, start_time, args, step_times, seed)
    return codes


def main():
    parser = argparse.ArgumentParser(description="Run the FloodDAN pipeline end to end")
    parser.add_argument("--config", type=Path, default=ROOT_DIR / "configs" / "default.yaml",
                        help="YAML run configuration (default: configs/default.yaml)")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0], help="Seeds to run (default: 0)")
    parser.add_argument("--skip-synth", action="store_true", help="Reuse existing dataset files")
    parser.add_argument("--skip-fewshot", action="store_true", help="Skip the few-shot sweep")
    parser.add_argument("--head-modes", nargs="+", choices=HEAD_MODES, default=HEAD_MODES,
                        help="Prediction heads to adapt; modes other than arch.head_mode "
                             "run under heads/<mode>/")
    args = parser.parse_args()

    setup_logging()
    logger.info("=" * 60)
    logger.info("FloodDAN pipeline: %s, seeds %s", args.config, args.seeds)
    logger.info("=" * 60)

    start_time = time.time()
    failed = []
    for seed in args.seeds:
        codes = run_seed(args, seed)
        if any(code != 0 for code in codes.values()):
            failed.append(seed)

    logger.info("=" * 60)
    logger.info("Pipeline complete in %.1fs", time.time() - start_time)
    if failed:
        logger.error("Seeds with failed steps: %s", failed)
    logger.info("=" * 60)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
