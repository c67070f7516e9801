"""
Figures for a run.

All charts are saved as PNGs to the output directory.
Uses matplotlib only.
"""

import logging
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .errors import ParseError
from .evaluation import EquivalenceStatement, FewShotResult

logger = logging.getLogger(__name__)

# ── Style constants ────────────────────────────────────────────────────────
DOMAIN_COLORS = {"source": "#3498db", "target": "#e67e22"}
TRUTH_COLOR = "#2c3e50"
PREDICTION_COLOR = "#e74c3c"
INTERVAL_COLOR = "#2ecc71"
FIG_DPI = 150
HISTOGRAM_COLUMNS = ["domain", "bin_left", "bin_right", "density"]


def _save(fig: plt.Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=FIG_DPI, bbox_inches="tight", facecolor="white")
    plt.close(fig)
    logger.info("Saved chart: %s", path.name)
    return path


def require_columns(df: pd.DataFrame, columns: list[str], what: str):
    if df.empty:
        raise ParseError(f"{what} is empty", line=1)
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ParseError(f"{what} lacks columns {missing}", line=1)
    for col in columns:
        values = pd.to_numeric(df[col], errors="coerce") if col != "domain" else df[col]
        bad = values.isna()
        if bad.any():
            # header is line 1
            raise ParseError(f"{what}: unreadable '{col}' value", line=int(np.argmax(bad.values)) + 2)


def chart_prediction_trace(trace: pd.DataFrame, output_dir: Path, title: str = "") -> Path:
    """Line chart: observed vs forecast runoff over the test windows."""
    require_columns(trace, ["truth", "prediction"], "prediction trace")
    fig, ax = plt.subplots(figsize=(11, 4.5))
    hours = np.arange(len(trace))
    ax.plot(hours, trace["truth"], color=TRUTH_COLOR, linewidth=1.0, label="Observed")
    ax.plot(hours, trace["prediction"], color=PREDICTION_COLOR, linewidth=1.0, alpha=0.85,
            label="Forecast")

    ax.set_xlabel("Test hour")
    ax.set_ylabel("Runoff (m³/s)")
    ax.set_title(title or "Spliced model: forecast vs observed runoff")
    ax.legend()
    ax.spines[["top", "right"]].set_visible(False)

    return _save(fig, output_dir / "prediction_vs_truth.png")


def chart_feature_histograms(histograms: pd.DataFrame, output_dir: Path,
                             name: str = "feature_histograms") -> Path:
    """Side-by-side feature value distributions, target left and source right."""
    require_columns(histograms, HISTOGRAM_COLUMNS, "histogram table")
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.5), sharex=True, sharey=True)
    for ax, domain in zip(axes, ("target", "source")):
        part = histograms[histograms["domain"] == domain]
        ax.bar(part["bin_left"], part["density"], width=part["bin_right"] - part["bin_left"],
               align="edge", color=DOMAIN_COLORS[domain], edgecolor="white", linewidth=0.5)
        ax.set_title(f"{domain.capitalize()} features")
        ax.set_xlabel("Feature value")
        ax.spines[["top", "right"]].set_visible(False)
    axes[0].set_ylabel("Density")

    return _save(fig, output_dir / f"{name}.png")


def chart_ratio_curve(trace: pd.DataFrame, output_dir: Path) -> Path:
    """One point per adaptation epoch: mean observed/forecast ratio on the probe set."""
    require_columns(trace, ["epoch", "ratio"], "adaptation trace")
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(trace["epoch"], trace["ratio"], marker="o", markersize=3, color="#8e44ad")
    ax.axhline(1.0, color="#95a5a6", linestyle="--", linewidth=1.0, label="Ratio = 1")

    ax.set_xlabel("Adaptation epoch")
    ax.set_ylabel("mean(observed / forecast)")
    ax.set_title("Forecast ratio during adversarial adaptation")
    ax.legend()
    ax.spines[["top", "right"]].set_visible(False)

    return _save(fig, output_dir / "adaptation_ratio.png")


def chart_fewshot_curve(
    results: list[FewShotResult],
    output_dir: Path,
    unsupervised_dc: float | None = None,
    equivalence: EquivalenceStatement | None = None,
) -> Path:
    """Few-shot mean DC vs supervision hours, with the unsupervised DC as a horizontal line."""
    if not results:
        raise ParseError("no few-shot results to plot", line=1)
    results = sorted(results, key=lambda r: r.hours)
    hours = [r.hours for r in results]
    means = np.array([r.mean_dc for r in results]) * 100
    spread = np.array([r.std_dc for r in results]) * 100

    fig, ax = plt.subplots(figsize=(8, 5))
    ax.errorbar(hours, means, yerr=spread, marker="o", capsize=3, color="#3498db",
                label="Few-shot supervised (mean ± sd)")
    if unsupervised_dc is not None:
        ax.axhline(unsupervised_dc * 100, color=PREDICTION_COLOR, linestyle="--", linewidth=1.5,
                   label="Unsupervised (FloodDAN)")
    if equivalence is not None and equivalence.in_range:
        ax.axvspan(equivalence.low_hours, max(equivalence.high_hours, equivalence.low_hours + 1e-9),
                   color=INTERVAL_COLOR, alpha=0.2, label="Equivalence interval")

    ax.set_xlabel("Supervision (hours of labeled target data)")
    ax.set_ylabel("DC (%)")
    ax.set_title("Few-shot supervised performance on the target watershed")
    ax.legend()
    ax.spines[["top", "right"]].set_visible(False)

    return _save(fig, output_dir / "fewshot_dc.png")


def chart_training_losses(trace: pd.DataFrame, output_dir: Path) -> Path:
    """Critic and generator losses per adaptation epoch."""
    require_columns(trace, ["epoch", "critic_loss", "generator_loss"], "adaptation trace")
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(trace["epoch"], trace["critic_loss"], label="Critic loss", color="#c0392b")
    ax.plot(trace["epoch"], trace["generator_loss"], label="Generator loss", color="#16a085")

    ax.set_xlabel("Adaptation epoch")
    ax.set_ylabel("Loss")
    ax.set_title("Adversarial losses")
    ax.legend()
    ax.spines[["top", "right"]].set_visible(False)

    return _save(fig, output_dir / "adaptation_losses.png")
