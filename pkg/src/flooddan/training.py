"""
Stage 1 (supervised pretraining on the source watershed) and stage 2
(WGAN-GP adversarial alignment of a target encoder against the frozen
source encoder).
"""

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from .config import AdaptConfig, ArchConfig, TrainConfig
from .errors import DivergenceError, MetricError, SizeError
from .hydrodata import Normalizer, WindowSet
from .metrics import dc
from .models import (
    Critic,
    ModelBundle,
    PredictionHead,
    RainfallEncoder,
    init_bundle,
    init_target_encoder,
    parameter_checksum,
    reset_parameters,
)

logger = logging.getLogger(__name__)

RATIO_EPS = 1e-6


# ── Traces ─────────────────────────────────────────────────────────────────
@dataclass
class EpochRecord:
    epoch: int
    lr: float
    wall_time: float
    loss: float | None = None
    generator_loss: float | None = None
    critic_loss: float | None = None
    ratio: float | None = None
    probe_dc: float | None = None
    diverged: bool = False


@dataclass
class TrainTrace:
    stage: str
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord):
        self.records.append(record)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records])

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]


EpochCallback = Callable[[str, EpochRecord], None]


# ── Tensors and schedules ──────────────────────────────────────────────────
def as_tensors(windows: WindowSet, dtype: torch.dtype = torch.float32):
    x = torch.as_tensor(windows.x, dtype=dtype)
    y_history = torch.as_tensor(windows.y_history, dtype=dtype)
    y = None if windows.y is None else torch.as_tensor(windows.y, dtype=dtype)
    return x, y_history, y


def cosine_scheduler(optimizer: torch.optim.Optimizer, total_steps: int):
    """Cosine decay from the configured rate to zero over ``total_steps`` optimizer steps."""
    return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, total_steps), eta_min=0.0)


def _epoch_generator(seed: int, epoch: int, stream: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + stream * 7_919 + epoch)


def _cycle_batches(n: int, batch_size: int, seed: int, stream: int) -> Iterator[torch.Tensor]:
    """Endless shuffled fixed-size batches; reshuffled on every pass."""
    batch_size = min(batch_size, n)
    for rnd in range(1 << 62):
        perm = torch.randperm(n, generator=_epoch_generator(seed, rnd, stream))
        for k in range(n // batch_size):
            yield perm[k * batch_size:(k + 1) * batch_size]


def _guard(loss: torch.Tensor, step: int, last: float | None, epoch: int, what: str,
           trace: "TrainTrace", lr: float, t0: float, callback: "EpochCallback | None"):
    """Raise on a non-finite loss after closing the trace with a diverged record."""
    if torch.isfinite(loss):
        return
    record = EpochRecord(epoch=epoch, lr=lr, wall_time=time.time() - t0, diverged=True)
    trace.append(record)
    if callback:
        callback(trace.stage, record)
    logger.error("%s diverged at epoch %d, step %d", trace.stage, epoch, step)
    raise DivergenceError(
        f"{what} became non-finite at epoch {epoch}, step {step} (last finite loss {last})",
        step=step,
        last_finite_loss=last,
        epoch=epoch,
    )


@torch.no_grad()
def encode(encoder: nn.Module, x: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    """Evaluation-mode features, restoring the encoder's previous mode."""
    was_training = encoder.training
    encoder.eval()
    out = torch.cat([encoder(chunk) for chunk in x.split(batch_size)])
    encoder.train(was_training)
    return out


@torch.no_grad()
def forecast_normalized(encoder: nn.Module, head: PredictionHead, windows: WindowSet,
                        joint: bool = False, dtype: torch.dtype = torch.float64) -> np.ndarray:
    """Normalized forecasts of encoder → head in evaluation mode."""
    if next(encoder.parameters()).dtype != dtype:
        encoder, head = copy.deepcopy(encoder).to(dtype), copy.deepcopy(head).to(dtype)
    x, y_history, _ = as_tensors(windows, dtype)
    if joint:
        x = torch.cat([x, y_history.unsqueeze(1)], dim=1)
    head_training = head.training
    head.eval()
    features = encode(encoder, x)
    preds = torch.cat([head(f, h) for f, h in zip(features.split(1024), y_history.split(1024))])
    head.train(head_training)
    return preds.cpu().numpy().astype(np.float64)


# ── Losses ─────────────────────────────────────────────────────────────────
def generator_loss(critic: nn.Module, target_features: torch.Tensor) -> torch.Tensor:
    """Negative mean critic score of target features."""
    return -critic(target_features).mean()


def gradient_penalty(critic: nn.Module, source_features: torch.Tensor, target_features: torch.Tensor,
                     eps: torch.Tensor | None = None,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean of (‖∇D(F̃)‖₂ − 1)² at F̃ = ε·F_target + (1−ε)·F_source, one ε per sample."""
    if source_features.shape != target_features.shape:
        raise SizeError(
            f"source and target batches differ: {tuple(source_features.shape)} vs "
            f"{tuple(target_features.shape)}"
        )
    if eps is None:
        eps = torch.rand(target_features.shape[0], generator=generator,
                         dtype=target_features.dtype)
    eps = eps.reshape(-1, *([1] * (target_features.dim() - 1)))
    interp = eps * target_features + (1 - eps) * source_features
    if not interp.requires_grad:
        interp.requires_grad_(True)
    scores = critic(interp)
    grads = None
    if scores.requires_grad:
        grads = torch.autograd.grad(scores.sum(), interp, create_graph=True, allow_unused=True)[0]
    if grads is None:
        grads = torch.zeros_like(interp)
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


def critic_loss(critic: nn.Module, source_features: torch.Tensor, target_features: torch.Tensor,
                w_gp: float, eps: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """mean D(F_target) − mean D(F_source) + w_GP · penalty; minimized by the critic."""
    loss = critic(target_features).mean() - critic(source_features).mean()
    if w_gp:
        loss = loss + w_gp * gradient_penalty(critic, source_features, target_features, eps, generator)
    return loss


def _decoupled_decay(optimizer: torch.optim.Optimizer, weight_decay: float):
    if not weight_decay:
        return
    with torch.no_grad():
        for group in optimizer.param_groups:
            for p in group["params"]:
                p.mul_(1.0 - group["lr"] * weight_decay)


# ── Stage 1 ────────────────────────────────────────────────────────────────
def pretrain(
    train: WindowSet,
    cfg: TrainConfig,
    arch: ArchConfig,
    bundle: ModelBundle | None = None,
    callback: EpochCallback | None = None,
    dtype: torch.dtype = torch.float32,
) -> tuple[RainfallEncoder, PredictionHead, TrainTrace]:
    """Minimize batch-mean squared error of the encoder + head forecast with AdamW and cosine decay."""
    if not train.labeled or len(train) == 0:
        raise SizeError("pretraining needs a non-empty labeled window set")
    if bundle is None:
        bundle = init_bundle(arch, train.station_count, train.window_length, cfg.seed)
    model = bundle.forecaster().to(dtype)
    model.train()

    x, y_history, y = as_tensors(train, dtype)
    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)
    scheduler = cosine_scheduler(optimizer, cfg.epochs * steps_per_epoch)
    trace = TrainTrace(stage="pretrain")

    logger.info("Pretraining on %d windows (%d epochs × %d steps)", n, cfg.epochs, steps_per_epoch)
    step, last = 0, None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.time()
            lr = scheduler.get_last_lr()[0]
            perm = torch.randperm(n, generator=_epoch_generator(cfg.seed, epoch))
            total = 0.0
            for idx in perm.split(cfg.batch_size):
                loss = F.mse_loss(model(x[idx], y_history[idx]), y[idx])
                _guard(loss, step, last, epoch, "training loss", trace, lr, t0, callback)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                scheduler.step()
                last = loss.item()
                total += last * len(idx)
                step += 1
            record = EpochRecord(epoch=epoch, lr=lr, wall_time=time.time() - t0, loss=total / n)
            trace.append(record)
            if callback:
                callback("pretrain", record)
            if epoch == 1 or epoch % 10 == 0 or epoch == cfg.epochs:
                logger.info("pretrain epoch %03d: loss=%.6g lr=%.3g", epoch, record.loss, lr)

    model.eval()
    return model.encoder, model.head, trace


# ── Stage 2 ────────────────────────────────────────────────────────────────
def _probe_stats(target_encoder, source_head, probe: WindowSet,
                 normalizer: Normalizer | None) -> tuple[float | None, float | None]:
    preds = forecast_normalized(target_encoder, source_head, probe,
                                dtype=next(target_encoder.parameters()).dtype)
    truth = probe.y
    if normalizer is not None:
        preds, truth = normalizer.invert(preds), normalizer.invert(truth)
    keep = np.abs(preds) > RATIO_EPS
    ratio = float(np.mean(truth[keep] / preds[keep])) if keep.any() else None
    try:
        probe_dc = dc(preds, truth)
    except MetricError:
        probe_dc = None
    return ratio, probe_dc


def adapt(
    target_train: WindowSet,
    source_train: WindowSet,
    source_encoder: RainfallEncoder,
    cfg: AdaptConfig,
    arch: ArchConfig,
    probe: WindowSet | None = None,
    source_head: PredictionHead | None = None,
    probe_normalizer: Normalizer | None = None,
    callback: EpochCallback | None = None,
) -> tuple[RainfallEncoder, Critic, TrainTrace]:
    """
    Align a target encoder with the frozen source encoder.

    Each generator step on the target encoder is preceded by ``n_critic``
    critic steps on fresh source/target batches. Only rainfall windows of the
    target set are read; its runoff arrays never enter a loss. The probe set
    (labeled target windows) feeds the per-epoch ratio diagnostic only.

    Both encoders run in evaluation mode throughout, so dropout cannot tell
    the domains apart; gradients still reach the target encoder.
    """
    if len(target_train) == 0 or len(source_train) == 0:
        raise SizeError("adaptation needs non-empty source and target window sets")
    if source_train.window_length != target_train.window_length:
        raise SizeError("source and target windows must share the window length")
    if cfg.audit_labels:
        target_train = target_train.with_poisoned_labels()
        logger.info("Label audit on: target runoff arrays poisoned with NaN")

    source_checksum = parameter_checksum(source_encoder)
    dtype = next(source_encoder.parameters()).dtype
    xs, _, _ = as_tensors(source_train, dtype)
    xt, _, _ = as_tensors(target_train, dtype)
    source_features = encode(source_encoder, xs)

    target_encoder = init_target_encoder(source_encoder, target_train.station_count, arch,
                                         cfg.seed, cfg.warm_start).to(dtype)
    # dropout off, matching the cached source features
    target_encoder.eval()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 1)
        critic = Critic(arch, target_train.window_length)
        reset_parameters(critic)
    critic = critic.to(dtype)

    # source and target batches must match for the interpolation
    batch = min(cfg.batch_size, len(source_train), len(target_train))
    gen_steps = math.ceil(len(target_train) / batch)
    critic_opt = torch.optim.RMSprop(critic.parameters(), lr=cfg.learning_rate)
    target_opt = torch.optim.RMSprop(target_encoder.parameters(), lr=cfg.learning_rate)
    critic_sched = cosine_scheduler(critic_opt, cfg.epochs * gen_steps * cfg.n_critic)
    target_sched = cosine_scheduler(target_opt, cfg.epochs * gen_steps)

    src_batches = _cycle_batches(len(source_train), batch, cfg.seed, stream=1)
    tgt_batches = _cycle_batches(len(target_train), batch, cfg.seed, stream=2)
    eps_generator = _epoch_generator(cfg.seed, 0, stream=3)
    trace = TrainTrace(stage="adapt")

    logger.info(
        "Adapting target encoder (d=%d) on %d windows: %d epochs × %d generator steps, n_critic=%d",
        target_train.station_count, len(target_train), cfg.epochs, gen_steps, cfg.n_critic,
    )
    step, last = 0, None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.time()
            lr = target_sched.get_last_lr()[0]
            d_total, g_total = 0.0, 0.0
            for _ in range(gen_steps):
                critic.requires_grad_(True)
                for _ in range(cfg.n_critic):
                    f_src = source_features[next(src_batches)]
                    with torch.no_grad():
                        f_tgt = target_encoder(xt[next(tgt_batches)])
                    loss_d = critic_loss(critic, f_src, f_tgt, cfg.w_gp, generator=eps_generator)
                    _guard(loss_d, step, last, epoch, "critic loss", trace, lr, t0, callback)
                    critic_opt.zero_grad()
                    loss_d.backward()
                    _decoupled_decay(critic_opt, cfg.weight_decay)
                    critic_opt.step()
                    critic_sched.step()
                    d_total += loss_d.item()

                critic.requires_grad_(False)
                loss_g = generator_loss(critic, target_encoder(xt[next(tgt_batches)]))
                _guard(loss_g, step, last, epoch, "generator loss", trace, lr, t0, callback)
                target_opt.zero_grad()
                loss_g.backward()
                _decoupled_decay(target_opt, cfg.weight_decay)
                target_opt.step()
                target_sched.step()
                last = loss_g.item()
                g_total += last
                step += 1

            record = EpochRecord(
                epoch=epoch,
                lr=lr,
                wall_time=time.time() - t0,
                generator_loss=g_total / gen_steps,
                critic_loss=d_total / (gen_steps * cfg.n_critic),
            )
            if probe is not None and source_head is not None:
                record.ratio, record.probe_dc = _probe_stats(target_encoder, source_head, probe,
                                                             probe_normalizer)
            trace.append(record)
            if callback:
                callback("adapt", record)
            logger.info(
                "adapt epoch %03d: L_D=%.4g L_G=%.4g lr=%.3g ratio=%s",
                epoch, record.critic_loss, record.generator_loss, lr,
                "n/a" if record.ratio is None else f"{record.ratio:.4f}",
            )

    critic.requires_grad_(True)
    target_encoder.eval()
    if parameter_checksum(source_encoder) != source_checksum:
        raise RuntimeError("source encoder parameters changed during adaptation")
    return target_encoder, critic, trace
