"""
Rainfall encoder (dilated causal TCN), convolutional prediction head and
Wasserstein domain critic.

Shapes follow the PyTorch Conv1d convention: rainfall windows are (B, d, T),
feature maps are (B, channels, T), historical runoff is (B, T).
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .config import ArchConfig
from .errors import DimensionError

logger = logging.getLogger(__name__)


class CausalConv1d(nn.Conv1d):
    """Conv1d left-padded so output step s sees only inputs at steps <= s."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, dilation: int = 1):
        super().__init__(in_channels, out_channels, kernel_size, dilation=dilation)
        self.left_pad = (kernel_size - 1) * dilation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(F.pad(x, (self.left_pad, 0)))


class TemporalBlock(nn.Module):
    """conv → ReLU → dropout, plus a skip path (1×1 projection when channel counts differ)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, dilation: int,
                 dropout: float):
        super().__init__()
        self.conv = CausalConv1d(in_channels, out_channels, kernel_size, dilation)
        self.dropout = nn.Dropout(dropout)
        self.skip = (nn.Conv1d(in_channels, out_channels, 1)
                     if in_channels != out_channels else nn.Identity())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dropout(F.relu(self.conv(x))) + self.skip(x)


class RainfallEncoder(nn.Module):
    def __init__(self, in_channels: int, arch: ArchConfig):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = arch.channels
        self.layers = nn.ModuleList(
            TemporalBlock(
                in_channels if i == 0 else arch.channels,
                arch.channels,
                arch.kernel_size,
                dilation,
                arch.dropout,
            )
            for i, dilation in enumerate(arch.dilations)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"encoder expects (B, {self.in_channels}, T) input, got {tuple(x.shape)}"
            )
        for layer in self.layers:
            x = layer(x)
        return x


class PredictionHead(nn.Module):
    """
    Three causal convolutions over [features ; historical runoff]; the scalar
    forecast is the last time step of the one-channel output. In residual
    mode the last observed runoff is added back.
    """

    def __init__(self, arch: ArchConfig, concat_history: bool = True):
        super().__init__()
        self.mode = arch.head_mode
        self.feature_channels = arch.channels
        self.concat_history = concat_history
        in_channels = arch.channels + (1 if concat_history else 0)
        self.conv1 = CausalConv1d(in_channels, arch.head_channels, arch.head_kernel_size)
        self.conv2 = CausalConv1d(arch.head_channels, arch.head_channels, arch.head_kernel_size)
        self.conv3 = CausalConv1d(arch.head_channels, 1, arch.head_final_kernel_size)

    def forward(self, features: torch.Tensor, y_history: torch.Tensor) -> torch.Tensor:
        if features.dim() != 3 or features.shape[1] != self.feature_channels:
            raise DimensionError(
                f"head expects (B, {self.feature_channels}, T) features, got {tuple(features.shape)}"
            )
        if y_history.shape != (features.shape[0], features.shape[2]):
            raise DimensionError(
                f"y_history shape {tuple(y_history.shape)} does not match features "
                f"{tuple(features.shape)}"
            )
        h = torch.cat([features, y_history.unsqueeze(1)], dim=1) if self.concat_history else features
        h = F.relu(self.conv1(h))
        h = F.relu(self.conv2(h))
        out = self.conv3(h)[:, 0, -1]
        if self.mode == "residual":
            out = y_history[:, -1] + out
        return out


class Critic(nn.Module):
    """Flattened feature map → 128 → 128 → 1 with leaky ReLU; the score is unbounded."""

    def __init__(self, arch: ArchConfig, window_length: int):
        super().__init__()
        self.feature_shape = (arch.channels, window_length)
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(arch.channels * window_length, arch.critic_hidden),
            nn.LeakyReLU(arch.leaky_slope),
            nn.Linear(arch.critic_hidden, arch.critic_hidden),
            nn.LeakyReLU(arch.leaky_slope),
            nn.Linear(arch.critic_hidden, 1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if tuple(features.shape[1:]) != self.feature_shape:
            raise DimensionError(
                f"critic expects (B, {self.feature_shape[0]}, {self.feature_shape[1]}) features, "
                f"got {tuple(features.shape)}"
            )
        return self.net(features).squeeze(-1)


class Forecaster(nn.Module):
    """Encoder + head; in the joint variant the encoder also sees historical runoff."""

    def __init__(self, encoder: RainfallEncoder, head: PredictionHead, joint: bool = False):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.joint = joint

    def forward(self, x: torch.Tensor, y_history: torch.Tensor) -> torch.Tensor:
        if self.joint:
            x = torch.cat([x, y_history.unsqueeze(1)], dim=1)
        return self.head(self.encoder(x), y_history)


# ── Construction ───────────────────────────────────────────────────────────
def reset_parameters(module: nn.Module):
    """Fan-in-scaled uniform weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class ModelBundle:
    arch: ArchConfig
    station_count: int
    window_length: int
    encoder: RainfallEncoder
    head: PredictionHead | None
    critic: Critic | None = None
    metadata: dict = field(default_factory=dict)

    def forecaster(self) -> Forecaster:
        return Forecaster(self.encoder, self.head, joint=self.arch.joint)


def build_encoder(arch: ArchConfig, station_count: int, seed: int) -> RainfallEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        encoder = RainfallEncoder(station_count + (1 if arch.joint else 0), arch)
        reset_parameters(encoder)
    return encoder


def init_bundle(arch: ArchConfig, station_count: int, window_length: int, seed: int) -> ModelBundle:
    """Fresh encoder, head and critic; bitwise reproducible for a given seed."""
    if station_count < 1:
        raise DimensionError(f"station count must be >= 1, got {station_count}")
    encoder = build_encoder(arch, station_count, seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        head = PredictionHead(arch, concat_history=not arch.joint)
        critic = Critic(arch, window_length)
        for module in (head, critic):
            reset_parameters(module)
    return ModelBundle(arch, station_count, window_length, encoder, head, critic)


def init_target_encoder(source_encoder: RainfallEncoder, station_count: int, arch: ArchConfig,
                        seed: int, warm_start: bool = True) -> RainfallEncoder:
    """
    Stage-2 starting point: a copy of the source encoder; the first layer is
    re-initialized when the station count differs. ``warm_start=False`` gives
    a cold start.
    """
    target = build_encoder(arch, station_count, seed)
    if not warm_start:
        return target
    same_inputs = target.in_channels == source_encoder.in_channels
    source_state = source_encoder.state_dict()
    state = target.state_dict()
    copied = 0
    for name, value in source_state.items():
        if not same_inputs and name.startswith("layers.0."):
            continue
        if name in state and state[name].shape == value.shape:
            state[name] = value.detach().clone()
            copied += 1
    target.load_state_dict(state)
    logger.info("Target encoder warm-started: %d/%d tensors copied", copied, len(state))
    return target


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

