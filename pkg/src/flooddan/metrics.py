"""
Forecast skill metrics and the serialized metrics report.

MSE and the deterministic coefficient (DC, the Nash-Sutcliffe form) are
computed in original units (m3/s), never on normalized values.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import MetricError

logger = logging.getLogger(__name__)


def _as_pair(predictions, truths, min_length: int) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(truths, dtype=np.float64).ravel()
    if len(p) != len(y):
        raise MetricError(f"length mismatch: {len(p)} predictions vs {len(y)} truths")
    if len(y) < min_length:
        raise MetricError(f"need at least {min_length} samples, got {len(y)}")
    return p, y


def mse(predictions, truths) -> float:
    p, y = _as_pair(predictions, truths, min_length=1)
    return float(np.mean(np.square(p - y)))


def dc(predictions, truths) -> float:
    """1 − Σ(ŷ−y)² / Σ(y−ȳ)²; may be negative, never above 1."""
    p, y = _as_pair(predictions, truths, min_length=2)
    total = np.sum(np.square(y - y.mean()))
    if total == 0.0:
        raise MetricError("DC undefined: all truth values are identical")
    return float(1.0 - np.sum(np.square(p - y)) / total)


@dataclass(frozen=True)
class ModelIdentity:
    stage: str                      # pretrain | adapt | supervised | fewshot | baseline
    variant: str                    # e.g. "rainfall_encoder+residual", "lower_bound"
    supervision_hours: int = 0


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    dc: float
    n: int
    model: ModelIdentity
    dataset: str
    seed: int
    config_digest: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def dc_percent(self) -> float:
        return self.dc * 100.0

    def to_dict(self) -> dict:
        payload = {
            "mse": self.mse,
            "dc": self.dc,
            "dc_percent": self.dc_percent,
            "n": self.n,
            "model": asdict(self.model),
            "dataset": self.dataset,
            "seed": self.seed,
            "config_digest": self.config_digest,
        }
        if self.extra:
            payload["extra"] = self.extra
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        return cls(
            mse=float(payload["mse"]),
            dc=float(payload["dc"]),
            n=int(payload["n"]),
            model=ModelIdentity(**payload["model"]),
            dataset=payload["dataset"],
            seed=int(payload["seed"]),
            config_digest=payload.get("config_digest", ""),
            extra=payload.get("extra", {}),
        )


def build_report(predictions, truths, model: ModelIdentity, dataset: str, seed: int,
                 config_digest: str = "") -> MetricsReport:
    report = MetricsReport(
        mse=mse(predictions, truths),
        dc=dc(predictions, truths),
        n=len(np.ravel(truths)),
        model=model,
        dataset=dataset,
        seed=seed,
        config_digest=config_digest,
    )
    logger.info("%s [%s]: MSE=%.4g DC=%.2f%% (n=%d)",
                model.variant, dataset, report.mse, report.dc_percent, report.n)
    return report
