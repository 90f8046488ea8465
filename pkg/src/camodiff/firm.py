"""Frequency-domain refinement of the control feature.

The control feature and the noisy latent's feature embedding are lifted to
the frequency domain; an attention map generated from the latent's magnitude
spectrum modulates the control spectrum, and a scalar zero-initialised gate
blends the modulation back in before returning to the feature domain.
Spectra are plain complex tensors in the source feature's (B, C, H, W) layout.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .control import ControlFeature
from .errors import (ConfigurationError, DimensionError,
                     InternalConsistencyError, ValidationError)


def fft_shift(x: torch.Tensor) -> torch.Tensor:
    """Circularly shift the two spatial axes by floor(N/2).

    Moves the zero-frequency bin to the centre so the high/low frequency
    split is spatially contiguous for the convolution stack.
    """
    return torch.roll(x, shifts=(x.shape[-2] // 2, x.shape[-1] // 2),
                      dims=(-2, -1))


def ifft_shift(x: torch.Tensor) -> torch.Tensor:
    """Exact inverse of :func:`fft_shift` for odd and even sizes."""
    return torch.roll(x, shifts=(-(x.shape[-2] // 2), -(x.shape[-1] // 2)),
                      dims=(-2, -1))


@dataclass(frozen=True)
class FirmConfig:
    channels: int
    hidden_channels: int = 64
    fft_scale: float = 1.0
    # Max tolerated |imag| after the inverse transform; None disables the
    # check (required during training, where a learned asymmetric attention
    # map makes a nonzero imaginary part expected; see README).
    residue_tol: float | None = 1e-5

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigurationError(f"channels={self.channels} must be >= 1")
        if self.fft_scale != 1.0:
            raise ConfigurationError(
                "fft_scale is fixed at 1.0 (transform size = feature size)")


class FrequencyRefiner(nn.Module):
    """Attention-gated high-frequency enhancement of a raw control feature."""

    def __init__(self, cfg: FirmConfig):
        super().__init__()
        self.cfg = cfg
        # attention generator: two 3x3 convs, squashed to the open range
        # (0, 2) so the neutral weight is exactly 1
        self.attn_conv1 = nn.Conv2d(cfg.channels, cfg.hidden_channels, 3,
                                    padding=1)
        self.attn_conv2 = nn.Conv2d(cfg.hidden_channels, cfg.channels, 3,
                                    padding=1)
        self.gate = nn.Parameter(torch.zeros(()))

    def attention_map(self, zt: torch.Tensor) -> torch.Tensor:
        """Frequency attention weights in (0, 2), one per spectrum bin."""
        magnitude = torch.fft.fft2(zt, norm="ortho").abs()
        a = fft_shift(magnitude)
        a = self.attn_conv2(F.silu(self.attn_conv1(a)))
        a = 2.0 * torch.sigmoid(a)
        return ifft_shift(a)

    def refine(self, ctrl: ControlFeature, zt: torch.Tensor) -> ControlFeature:
        """Modulate ctrl's spectrum by the latent-driven attention map.

        The attention map scales the full complex spectrum (phase kept), the
        gate blends the resulting gain on top of the original spectrum, and
        the real part of the inverse transform is returned.
        """
        if ctrl.stage != "raw":
            raise ValidationError(
                f"refine expects a raw control feature, got stage={ctrl.stage!r}")
        if ctrl.data.shape[-2:] != zt.shape[-2:]:
            raise DimensionError(
                f"control {tuple(ctrl.data.shape)} and latent feature "
                f"{tuple(zt.shape)} are not spatially aligned")
        if ctrl.data.shape[1] != self.cfg.channels or zt.shape[1] != self.cfg.channels:
            raise DimensionError(
                f"expected {self.cfg.channels} channels, got control "
                f"{ctrl.data.shape[1]} and latent feature {zt.shape[1]}")

        attn = self.attention_map(zt)
        spectrum = torch.fft.fft2(ctrl.data, norm="ortho")
        enhanced = spectrum * attn
        gain = enhanced - spectrum
        refined = spectrum + self.gate * gain
        out = torch.fft.ifft2(refined, norm="ortho")

        if self.cfg.residue_tol is not None:
            residue = out.imag.detach().abs().max().item()
            if residue > self.cfg.residue_tol:
                raise InternalConsistencyError(
                    f"imaginary residue {residue:.3e} exceeds "
                    f"{self.cfg.residue_tol:.1e}; attention symmetry handling "
                    "is broken or the tolerance is too tight for a trained gate")
        return ControlFeature(data=out.real, stage="firm_refined")

    def forward(self, ctrl: ControlFeature, zt: torch.Tensor) -> ControlFeature:
        return self.refine(ctrl, zt)
