"""
Central configuration for the FloodDAN pipeline.

All hyperparameters, schema mappings and paths live in frozen dataclasses
resolved from one YAML run file. Defaults are the published setup: forecast
period 6 h, 100 epochs, batch 64, learning rate 5e-4, weight decay 8e-3,
gradient-penalty weight 10.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml
from dotenv import load_dotenv

from .errors import ConfigurationError

load_dotenv()

# ── Logging ────────────────────────────────────────────────────────────────
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"
LOG_LEVEL_ENV = "FLOODDAN_LOG_LEVEL"

logger = logging.getLogger(__name__)


def setup_logging(level: int | str | None = None):
    """Configure root logger; verbosity defaults to $FLOODDAN_LOG_LEVEL or INFO."""
    if level is None:
        level = os.getenv(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATEFMT, force=True)


def _require(condition: bool, key: str, message: str):
    if not condition:
        raise ConfigurationError(f"{key}: {message}")


# ── Data ───────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class SeriesSchema:
    """Column mapping of a watershed CSV. ``rainfall=None`` selects every ``rainfall_prefix`` column."""

    timestamp: str = "timestamp"
    runoff: str = "runoff"
    rainfall: tuple[str, ...] | None = None
    rainfall_prefix: str = "rain_"


@dataclass(frozen=True)
class DataConfig:
    source_path: str | None = None
    target_path: str | None = None
    schema: SeriesSchema = field(default_factory=SeriesSchema)
    train_fraction: float = 0.7

    def __post_init__(self):
        _require(0.0 < self.train_fraction < 1.0, "data.train_fraction", "must lie in (0, 1)")


@dataclass(frozen=True)
class WindowConfig:
    window_length: int = 24
    forecast_period: int = 6

    def __post_init__(self):
        _require(self.window_length >= 1, "window.window_length", "must be >= 1")
        _require(self.forecast_period >= 1, "window.forecast_period", "must be >= 1")

    @property
    def span(self) -> int:
        """Rows consumed by one labeled window (T + t)."""
        return self.window_length + self.forecast_period


@dataclass(frozen=True)
class SyntheticConfig:
    """Storm-pulse rainfall and unit-hydrograph runoff for one synthetic watershed."""

    name: str = "source"
    station_count: int = 11
    series_length: int = 6000
    storm_rate: float = 0.012          # storms per hour
    intensity_scale: float = 3.0       # mm/h
    duration_scale: float = 8.0        # hours
    time_constant: float = 10.0        # hours
    peak_delay: int = 3                # hours
    baseflow: float = 20.0             # m3/s
    runoff_gain: float = 150.0         # m3/s per mm/h of mean areal rainfall
    noise: float = 2.0                 # m3/s, uniform half-width
    seed: int = 1
    start: str = "2000-01-01T00:00:00"

    def __post_init__(self):
        prefix = f"synth.{self.name}"
        _require(self.station_count >= 1, f"{prefix}.station_count", "must be >= 1")
        _require(self.series_length >= 2, f"{prefix}.series_length", "must be >= 2")
        _require(self.storm_rate >= 0, f"{prefix}.storm_rate", "must be >= 0")
        for key in ("intensity_scale", "duration_scale", "time_constant", "runoff_gain"):
            _require(getattr(self, key) > 0, f"{prefix}.{key}", "must be > 0")
        _require(self.peak_delay >= 0, f"{prefix}.peak_delay", "must be >= 0")
        _require(self.baseflow >= 0, f"{prefix}.baseflow", "must be >= 0")
        _require(self.noise >= 0, f"{prefix}.noise", "must be >= 0")


# ── Models ─────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class ArchConfig:
    channels: int = 36
    kernel_size: int = 2
    dilations: tuple[int, ...] = (1, 2, 4)
    dropout: float = 0.2
    head_channels: int = 36
    head_kernel_size: int = 2
    head_final_kernel_size: int = 3
    critic_hidden: int = 128
    leaky_slope: float = 0.2
    head_mode: str = "residual"
    joint: bool = False

    def __post_init__(self):
        _require(self.head_mode in ("direct", "residual"), "arch.head_mode",
                 "must be 'direct' or 'residual'")
        _require(0.0 <= self.dropout < 1.0, "arch.dropout", "must lie in [0, 1)")
        _require(self.channels >= 1 and self.head_channels >= 1, "arch.channels", "must be >= 1")
        _require(len(self.dilations) >= 1, "arch.dilations", "needs at least one layer")

    @property
    def receptive_field(self) -> int:
        return 1 + sum(d * (self.kernel_size - 1) for d in self.dilations)


# ── Training ───────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 5e-4
    weight_decay: float = 8e-3
    seed: int = 0

    def __post_init__(self):
        _require(self.epochs >= 1, "train.epochs", "must be >= 1")
        _require(self.batch_size >= 1, "train.batch_size", "must be >= 1")
        _require(self.learning_rate > 0, "train.learning_rate", "must be > 0")
        _require(self.weight_decay >= 0, "train.weight_decay", "must be >= 0")


@dataclass(frozen=True)
class AdaptConfig(TrainConfig):
    w_gp: float = 10.0
    n_critic: int = 5
    warm_start: bool = True
    audit_labels: bool = False

    def __post_init__(self):
        super().__post_init__()
        _require(self.w_gp >= 0, "adapt.w_gp", "must be >= 0")
        _require(self.n_critic >= 1, "adapt.n_critic", "must be >= 1")


# ── Evaluation ─────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class FewShotConfig:
    hours: tuple[int, ...] = (50, 100, 200, 400, 800)
    repeats: int = 20
    contiguous: bool = False

    def __post_init__(self):
        _require(all(h >= 1 for h in self.hours), "fewshot.hours", "must be positive")
        _require(self.repeats >= 1, "fewshot.repeats", "must be >= 1")


@dataclass(frozen=True)
class EvaluateConfig:
    supervised_reference: bool = True
    histogram_bins: int = 50
    alignment_samples: int = 256


def _default_target_synth() -> SyntheticConfig:
    return SyntheticConfig(
        name="target",
        station_count=7,
        series_length=3000,
        intensity_scale=4.5,
        time_constant=6.0,
        peak_delay=2,
        baseflow=15.0,
        runoff_gain=200.0,
        seed=2,
        start="2005-01-01T00:00:00",
    )


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    synth_source: SyntheticConfig = field(default_factory=SyntheticConfig)
    synth_target: SyntheticConfig = field(default_factory=_default_target_synth)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    fewshot: FewShotConfig = field(default_factory=FewShotConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def __post_init__(self):
        _require(self.window.window_length >= self.arch.receptive_field, "window.window_length",
                 f"must cover the encoder receptive field of {self.arch.receptive_field} steps")
        for synth in (self.synth_source, self.synth_target):
            _require(synth.series_length > self.window.span, f"synth.{synth.name}.series_length",
                     f"must exceed T + t = {self.window.span}")

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    def source_path(self) -> Path:
        return Path(self.data.source_path) if self.data.source_path else self.out_path / "source.csv"

    def target_path(self) -> Path:
        return Path(self.data.target_path) if self.data.target_path else self.out_path / "target.csv"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ── Loading ────────────────────────────────────────────────────────────────
_SECTIONS = {
    "data": DataConfig,
    "window": WindowConfig,
    "arch": ArchConfig,
    "train": TrainConfig,
    "adapt": AdaptConfig,
    "fewshot": FewShotConfig,
    "evaluate": EvaluateConfig,
}


def _build(cls, values: dict | None, key: str):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"{key}: unknown key(s) {', '.join(unknown)}")
    for name, value in list(values.items()):
        if isinstance(value, list):
            values[name] = tuple(value)
    if cls is DataConfig and isinstance(values.get("schema"), dict):
        values["schema"] = _build(SeriesSchema, values["schema"], f"{key}.schema")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"{key}: {exc}") from exc


def _set_nested(raw: dict, dotted: str, value: Any):
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"{dotted}: '{part}' is not a section")
    node[parts[-1]] = value


def parse_override(item: str) -> tuple[str, Any]:
    """Parse ``section.key=value``; the value is read as YAML (numbers, lists, booleans)."""
    if "=" not in item:
        raise ConfigurationError(f"override '{item}' must look like section.key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            value = float(value)
        except ValueError:
            pass
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Resolve a run configuration from a YAML file plus dotted-key overrides."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping")

    for key, value in (overrides or {}).items():
        if value is not None:
            _set_nested(raw, key, value)

    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed", "out_dir", "synth"})
    if unknown:
        raise ConfigurationError(f"unknown section(s): {', '.join(unknown)}")

    seed = int(raw.get("seed", 0))
    kwargs: dict[str, Any] = {"seed": seed}
    if "out_dir" in raw:
        kwargs["out_dir"] = str(raw["out_dir"])
    for name, cls in _SECTIONS.items():
        section = dict(raw.get(name) or {})
        if cls in (TrainConfig, AdaptConfig):
            section.setdefault("seed", seed)
        kwargs[name] = _build(cls, section, name)

    synth = raw.get("synth") or {}
    base_target = asdict(_default_target_synth())
    kwargs["synth_source"] = _build(SyntheticConfig, {"name": "source", **(synth.get("source") or {})},
                                    "synth.source")
    kwargs["synth_target"] = _build(SyntheticConfig, {**base_target, **(synth.get("target") or {})},
                                    "synth.target")

    config = RunConfig(**kwargs)
    logger.debug("Resolved config digest %s", config.digest()[:12])
    return config


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
