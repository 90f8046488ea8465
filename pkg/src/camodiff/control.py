"""Mask controller and cross normalization of control statistics.

The controller encodes a binary object mask into a control feature at the
denoiser's injection resolution. Cross normalization then re-statisticizes
that feature so its per-channel mean/std match the noisy latent feature it
will be added to.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, ValidationError

STAGES = ("raw", "firm_refined", "cross_normalized")


@dataclass
class ControlFeature:
    """A control feature plus its position in the raw -> refined -> normalized chain."""

    data: torch.Tensor  # (B, C, H, W)
    stage: str = "raw"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}")


@dataclass
class ChannelStats:
    mean: torch.Tensor  # (B, C)
    std: torch.Tensor   # (B, C), population
    eps_guard: float = 1e-5


def channel_stats(x: torch.Tensor, eps_guard: float = 1e-5) -> ChannelStats:
    """Per-sample, per-channel mean and population std over spatial positions."""
    if x.ndim != 4 or x.shape[-1] * x.shape[-2] == 0:
        raise DimensionError(f"expected non-empty (B, C, H, W), got {tuple(x.shape)}")
    mean = x.mean(dim=(-2, -1))
    var = x.var(dim=(-2, -1), unbiased=False)
    return ChannelStats(mean=mean, std=var.sqrt(), eps_guard=eps_guard)


def cross_normalize(ctrl: ControlFeature, zt: torch.Tensor,
                    eps_guard: float = 1e-5) -> ControlFeature:
    """Standardize ctrl per channel, then re-affine with zt's channel stats.

    Output channels carry zt's mean and std exactly (up to the eps guard
    inside the square root), which keeps the injected control signal
    distributionally consistent with the features it joins.
    """
    if ctrl.stage != "firm_refined":
        raise ValidationError(
            f"cross_normalize expects a firm_refined feature, got {ctrl.stage!r}")
    x = ctrl.data
    if x.shape[:2] != zt.shape[:2]:
        raise DimensionError(
            f"batch/channel mismatch: control {tuple(x.shape[:2])} vs "
            f"latent feature {tuple(zt.shape[:2])}")

    s_c = channel_stats(x, eps_guard)
    s_z = channel_stats(zt, eps_guard)
    mu_c = s_c.mean[..., None, None]
    mu_z = s_z.mean[..., None, None]
    var_c = s_c.std[..., None, None] ** 2
    std_z = s_z.std[..., None, None]
    out = mu_z + (x - mu_c) / torch.sqrt(var_c + eps_guard) * std_z
    return ControlFeature(data=out, stage="cross_normalized")


@dataclass(frozen=True)
class ControllerConfig:
    in_size: int
    out_size: int
    out_channels: int
    widths: tuple[int, int] = (16, 32)

    def __post_init__(self):
        if self.in_size % self.out_size != 0:
            raise ConfigurationError(
                f"in_size={self.in_size} not divisible by out_size={self.out_size}")
        ratio = self.in_size // self.out_size
        if ratio not in (1, 2, 4, 8):
            raise ConfigurationError(
                f"downsample ratio {ratio} unsupported (need 1, 2, 4, or 8)")

    @property
    def strides(self) -> tuple[int, int, int]:
        ratio = self.in_size // self.out_size
        k = ratio.bit_length() - 1  # log2
        return tuple([2] * k + [1] * (3 - k))


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=stride)

    def forward(self, x):
        h = F.silu(self.conv1(x))
        h = self.conv2(h)
        return F.silu(h + self.skip(x))


class MaskController(nn.Module):
    """Three strided residual blocks encoding a binary mask to a raw control feature."""

    def __init__(self, cfg: ControllerConfig):
        super().__init__()
        self.cfg = cfg
        w1, w2 = cfg.widths
        s1, s2, s3 = cfg.strides
        self.blocks = nn.Sequential(
            _ResBlock(1, w1, s1),
            _ResBlock(w1, w2, s2),
            _ResBlock(w2, cfg.out_channels, s3),
        )

    def encode_mask(self, mask) -> ControlFeature:
        """Encode a {0,1} mask of shape (B, 1, H, W), (B, H, W) or (H, W)."""
        x = self._as_mask_tensor(mask)
        if x.shape[-1] != self.cfg.in_size or x.shape[-2] != self.cfg.in_size:
            raise DimensionError(
                f"mask is {tuple(x.shape[-2:])}, controller expects "
                f"({self.cfg.in_size}, {self.cfg.in_size})")
        bad = ((x != 0) & (x != 1)).sum().item()
        if bad:
            raise ValidationError(f"mask contains {bad} non-binary pixels")
        return ControlFeature(data=self.blocks(x), stage="raw")

    def forward(self, mask) -> ControlFeature:
        return self.encode_mask(mask)

    @staticmethod
    def _as_mask_tensor(mask) -> torch.Tensor:
        if isinstance(mask, np.ndarray):
            mask = torch.from_numpy(np.ascontiguousarray(mask))
        if not torch.is_tensor(mask):
            raise ValidationError(f"unsupported mask type {type(mask).__name__}")
        x = mask if mask.dtype.is_floating_point else mask.float()
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        elif x.ndim != 4:
            raise DimensionError(f"mask rank {x.ndim} unsupported")
        return x
