"""
Spliced-model inference, the baseline hierarchy, few-shot sweeps,
feature-alignment diagnostics and the supervision-equivalence statement.

All metrics are computed after inverting the target runoff normalization.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import torch

from .config import ArchConfig, TrainConfig, with_seed
from .errors import ConfigurationError, SizeError
from .hydrodata import Normalizer, WindowSet
from .io import save_csv
from .metrics import MetricsReport, ModelIdentity, build_report
from .models import PredictionHead, RainfallEncoder
from .training import forecast_normalized, pretrain

logger = logging.getLogger(__name__)

# variant name → (head mode, joint encoder)
SUPERVISED_VARIANTS = {
    "rainfall_encoder": ("direct", False),
    "rainfall_encoder+residual": ("residual", False),
    "joint_encoder": ("direct", True),
}

MODEL_LABELS = {
    "rainfall_encoder": "Rainfall Encoder",
    "rainfall_encoder+residual": "Rainfall Encoder + Residual Prediction",
    "joint_encoder": "Joint Encoder",
    "flooddan+direct": "Rainfall Encoder (FloodDAN)",
    "flooddan+residual": "Rainfall Encoder + Residual Prediction (FloodDAN)",
    "lower_bound": "Lower-bound (persistence)",
}

SUPERVISION_LABELS = {
    "supervised": "Fully supervised",
    "fewshot": "Few-shot supervised",
    "adapt": "Unsupervised",
    "baseline": "None",
}


# ── Inference ──────────────────────────────────────────────────────────────
def predict(
    target_encoder: RainfallEncoder,
    source_head: PredictionHead,
    normalizer: Normalizer,
    dataset: WindowSet,
    model: ModelIdentity,
    seed: int = 0,
    config_digest: str = "",
    joint: bool = False,
) -> tuple[np.ndarray, MetricsReport]:
    """
    Run encoder → head on labeled target windows in evaluation mode and score
    the forecasts in original units.

    Returns the denormalized predictions and their report.
    """
    expected = target_encoder.in_channels - (1 if joint else 0)
    if normalizer.station_count != expected or dataset.station_count != expected:
        raise ConfigurationError(
            f"encoder expects {expected} stations; normalizer has {normalizer.station_count}, "
            f"dataset has {dataset.station_count}"
        )
    if not dataset.labeled:
        raise SizeError("prediction needs labeled windows")
    predictions = normalizer.invert(forecast_normalized(target_encoder, source_head, dataset, joint))
    truth = normalizer.invert(dataset.y)
    return predictions, build_report(predictions, truth, model, dataset.name, seed, config_digest)


def lower_bound_baseline(dataset: WindowSet, normalizer: Normalizer, seed: int = 0,
                         config_digest: str = "") -> MetricsReport:
    """Persistence: the forecast is the last observed runoff of the window."""
    predictions = normalizer.invert(dataset.y_history[:, -1])
    return build_report(predictions, normalizer.invert(dataset.y),
                        ModelIdentity(stage="baseline", variant="lower_bound"),
                        dataset.name, seed, config_digest)


def variant_arch(arch: ArchConfig, variant: str) -> ArchConfig:
    if variant not in SUPERVISED_VARIANTS:
        raise ConfigurationError(f"unknown supervised variant '{variant}'")
    head_mode, joint = SUPERVISED_VARIANTS[variant]
    return replace(arch, head_mode=head_mode, joint=joint)


def supervised_baseline(
    train: WindowSet,
    test: WindowSet,
    cfg: TrainConfig,
    arch: ArchConfig,
    normalizer: Normalizer,
    variant: str = "rainfall_encoder+residual",
    stage: str = "supervised",
    config_digest: str = "",
) -> MetricsReport:
    """Train a forecaster from scratch on target labels and score it on the test split."""
    arch = variant_arch(arch, variant)
    encoder, head, trace = pretrain(train, cfg, arch)
    _, report = predict(
        encoder, head, normalizer, test,
        ModelIdentity(stage=stage, variant=variant, supervision_hours=len(train)),
        seed=cfg.seed, config_digest=config_digest, joint=arch.joint,
    )
    return replace(report, extra={"final_train_loss": trace.final.loss})


# ── Few-shot ───────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class FewShotResult:
    hours: int
    mse: tuple[float, ...]
    dc: tuple[float, ...]
    seed: int = 0
    config_digest: str = ""

    @property
    def repeats(self) -> int:
        return len(self.dc)

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse))

    @property
    def mean_dc(self) -> float:
        return float(np.mean(self.dc))

    @property
    def std_dc(self) -> float:
        return float(np.std(self.dc))

    def to_dict(self) -> dict:
        return {
            "hours": self.hours,
            "repeats": self.repeats,
            "mse": list(self.mse),
            "dc": list(self.dc),
            "mean_mse": self.mean_mse,
            "mean_dc": self.mean_dc,
            "std_dc": self.std_dc,
            "seed": self.seed,
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "FewShotResult":
        return cls(
            hours=int(payload["hours"]),
            mse=tuple(float(v) for v in payload["mse"]),
            dc=tuple(float(v) for v in payload["dc"]),
            seed=int(payload.get("seed", 0)),
            config_digest=payload.get("config_digest", ""),
        )


def repeat_rng(master_seed: int, repeat: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, repeat])


def sample_indices(n: int, hours: int, rng: np.random.Generator, contiguous: bool = False) -> np.ndarray:
    if contiguous:
        start = int(rng.integers(0, n - hours + 1))
        return np.arange(start, start + hours)
    return np.sort(rng.choice(n, size=hours, replace=False))


def fewshot_run(
    target_train: WindowSet,
    target_test: WindowSet,
    hours: int,
    cfg: TrainConfig,
    arch: ArchConfig,
    normalizer: Normalizer,
    repeats: int = 20,
    contiguous: bool = False,
    config_digest: str = "",
) -> FewShotResult:
    """
    Repeatedly train the encoder + residual head from scratch on ``hours``
    randomly drawn target windows and score on the fixed test split.

    Repeat r samples with ``default_rng([cfg.seed, r])`` and trains with seed
    ``cfg.seed + r``, so results do not depend on execution order.
    """
    n = len(target_train)
    if not 1 <= hours <= n:
        raise SizeError(f"few-shot hours={hours} outside the available 1..{n} training windows")
    mses, dcs = [], []
    for r in range(repeats):
        idx = sample_indices(n, hours, repeat_rng(cfg.seed, r), contiguous)
        report = supervised_baseline(
            target_train.subset(idx), target_test, with_seed(cfg, cfg.seed + r), arch, normalizer,
            variant="rainfall_encoder+residual", stage="fewshot", config_digest=config_digest,
        )
        mses.append(report.mse)
        dcs.append(report.dc)
        logger.debug("few-shot %dh repeat %d: DC=%.4f", hours, r, report.dc)
    result = FewShotResult(hours=hours, mse=tuple(mses), dc=tuple(dcs), seed=cfg.seed,
                           config_digest=config_digest)
    logger.info("Few-shot %d h × %d: mean DC=%.2f%% (sd %.2f), mean MSE=%.4g",
                hours, repeats, result.mean_dc * 100, result.std_dc * 100, result.mean_mse)
    return result


# ── Feature alignment ──────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class AlignmentStats:
    mean_gap: np.ndarray      # per channel, |mean_src − mean_tgt|
    var_gap: np.ndarray       # per channel, |var_src − var_tgt|
    mean_term: float
    cov_term: float
    histograms: pd.DataFrame = field(default_factory=pd.DataFrame)

    @property
    def distance(self) -> float:
        return self.mean_term + self.cov_term

    def summary(self) -> dict:
        return {
            "distance": self.distance,
            "mean_term": self.mean_term,
            "cov_term": self.cov_term,
            "max_channel_mean_gap": float(self.mean_gap.max()),
            "max_channel_var_gap": float(self.var_gap.max()),
        }


def _as_feature_array(features) -> np.ndarray:
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().numpy()
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or len(arr) == 0:
        raise SizeError(f"feature batch must be non-empty (N, C, T), got shape {arr.shape}")
    return arr


def feature_alignment_stats(source_features, target_features, bins: int = 50) -> AlignmentStats:
    """
    Two-moment distance between feature batches: squared gap of the flattened
    means plus squared Frobenius gap of the covariances (population form).
    """
    src, tgt = _as_feature_array(source_features), _as_feature_array(target_features)
    if src.shape[1:] != tgt.shape[1:]:
        raise SizeError(f"feature shapes differ: {src.shape[1:]} vs {tgt.shape[1:]}")

    def channel_moments(a):
        per_channel = a.transpose(1, 0, 2).reshape(a.shape[1], -1)
        return per_channel.mean(axis=1), per_channel.var(axis=1)

    (ms, vs), (mt, vt) = channel_moments(src), channel_moments(tgt)

    fs, ft = src.reshape(len(src), -1), tgt.reshape(len(tgt), -1)
    mean_term = float(np.sum(np.square(fs.mean(axis=0) - ft.mean(axis=0))))
    cov_s = np.atleast_2d(np.cov(fs, rowvar=False, ddof=0))
    cov_t = np.atleast_2d(np.cov(ft, rowvar=False, ddof=0))
    cov_term = float(np.sum(np.square(cov_s - cov_t)))

    lo = min(fs.min(), ft.min())
    hi = max(fs.max(), ft.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    frames = []
    for domain, values in (("source", fs), ("target", ft)):
        counts, _ = np.histogram(values.ravel(), bins=edges)
        frames.append(pd.DataFrame({
            "domain": domain,
            "bin_left": edges[:-1],
            "bin_right": edges[1:],
            "count": counts,
            "density": counts / counts.sum() / np.diff(edges),
        }))
    return AlignmentStats(
        mean_gap=np.abs(ms - mt),
        var_gap=np.abs(vs - vt),
        mean_term=mean_term,
        cov_term=cov_term,
        histograms=pd.concat(frames, ignore_index=True),
    )


# ── Supervision equivalence ────────────────────────────────────────────────
@dataclass(frozen=True)
class EquivalenceStatement:
    unsupervised_dc: float
    status: str                          # bracketed | exact | below_range | above_range
    low_hours: int | None = None
    high_hours: int | None = None
    interpolated_hours: float | None = None

    @property
    def in_range(self) -> bool:
        return self.status in ("bracketed", "exact")

    def describe(self) -> str:
        if self.status == "exact":
            return f"equivalent to {self.low_hours} h of supervision"
        if self.status == "bracketed":
            return (f"equivalent to {self.low_hours}–{self.high_hours} h of supervision "
                    f"(≈{self.interpolated_hours:.0f} h interpolated)")
        side = "below" if self.status == "below_range" else "above"
        return f"unsupervised DC lies {side} the few-shot sweep; no equivalence interval"

    def to_dict(self) -> dict:
        return {
            "unsupervised_dc": self.unsupervised_dc,
            "status": self.status,
            "low_hours": self.low_hours,
            "high_hours": self.high_hours,
            "interpolated_hours": self.interpolated_hours,
            "statement": self.describe(),
        }


def supervision_equivalence(unsupervised: MetricsReport | float,
                            fewshot_results: list[FewShotResult]) -> EquivalenceStatement:
    """
    Hours interval whose mean few-shot DCs bracket the unsupervised DC.

    Sweep points are scanned in ascending hours and the first bracketing pair
    wins; the position inside it is linearly interpolated.
    """
    u = unsupervised.dc if isinstance(unsupervised, MetricsReport) else float(unsupervised)
    if not fewshot_results:
        raise SizeError("supervision equivalence needs at least one few-shot result")
    points = sorted((r.hours, r.mean_dc) for r in fewshot_results)

    for hours, value in points:
        if value == u:
            return EquivalenceStatement(u, "exact", hours, hours, float(hours))
    for (h0, d0), (h1, d1) in zip(points, points[1:]):
        if min(d0, d1) <= u <= max(d0, d1):
            interp = h0 + (u - d0) / (d1 - d0) * (h1 - h0)
            return EquivalenceStatement(u, "bracketed", h0, h1, float(interp))

    status = "below_range" if u < min(d for _, d in points) else "above_range"
    logger.warning("Unsupervised DC %.4f is %s of the few-shot sweep", u, status.replace("_", " "))
    return EquivalenceStatement(u, status)


# ── Exports ────────────────────────────────────────────────────────────────
def export_prediction_trace(truth, predictions, path) -> None:
    df = pd.DataFrame({"truth": np.asarray(truth, dtype=np.float64),
                       "prediction": np.asarray(predictions, dtype=np.float64)})
    save_csv(df, path)


def export_alignment_histograms(stats: AlignmentStats, path) -> None:
    save_csv(stats.histograms, path)


def results_table(reports: list[MetricsReport], fewshot: list[FewShotResult] | None = None,
                  equivalence: EquivalenceStatement | None = None) -> pd.DataFrame:
    """Results grid: supervision, model, training hours, MSE and DC (%)."""
    rows = [{
        "supervision": SUPERVISION_LABELS.get(r.model.stage, r.model.stage),
        "model": MODEL_LABELS.get(r.model.variant, r.model.variant),
        "training_hours": r.model.supervision_hours,
        "mse": r.mse,
        "dc_percent": r.dc_percent,
    } for r in reports]
    for result in sorted(fewshot or [], key=lambda f: f.hours):
        rows.append({
            "supervision": SUPERVISION_LABELS["fewshot"],
            "model": MODEL_LABELS["rainfall_encoder+residual"],
            "training_hours": result.hours,
            "mse": result.mean_mse,
            "dc_percent": result.mean_dc * 100.0,
        })
    order = list(SUPERVISION_LABELS.values())
    table = pd.DataFrame(rows, columns=["supervision", "model", "training_hours", "mse", "dc_percent"])
    table["_rank"] = table["supervision"].map({s: i for i, s in enumerate(order)}).fillna(len(order))
    table = table.sort_values(["_rank", "training_hours"], kind="stable").drop(columns="_rank")
    if equivalence is not None:
        table["equivalent_hours"] = np.where(
            table["supervision"] == SUPERVISION_LABELS["adapt"],
            equivalence.describe(), "",
        )
    return table.reset_index(drop=True)
