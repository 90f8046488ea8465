"""Toy conditional UNet noise predictor.

Encoder/decoder with timestep embeddings, cross-attention over text
embeddings at the configured resolutions, and a single control injection
point at the output of the first encoder stage. Only the cross-attention
output projections are trainable under the default finetuning policy;
everything else in the UNet stays frozen.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .control import ControlFeature
from .errors import ConfigurationError, DimensionError, ValidationError
from .text_embed import EmbeddingMatrix

PARAM_TAGS = ("controller_firm", "cross_attn_projectors", "frozen")
POLICIES = ("paper_policy", "full")


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 4)
    sample_size: int = 32
    attn_resolutions: tuple[int, ...] = (16, 8)
    text_dim: int = 128
    time_dim: int = 128
    control_scale: float = 1.2

    def __post_init__(self):
        if self.control_scale <= 0:
            raise ConfigurationError(f"control_scale={self.control_scale} must be > 0")
        if len(self.channel_mults) < 1:
            raise ConfigurationError("channel_mults must be non-empty")
        if self.sample_size % (1 << (len(self.channel_mults) - 1)) != 0:
            raise ConfigurationError(
                f"sample_size={self.sample_size} not divisible by "
                f"2^{len(self.channel_mults) - 1}")

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def level_resolutions(self) -> tuple[int, ...]:
        return tuple(self.sample_size >> i for i in range(len(self.channel_mults)))


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64)
                      / max(half - 1, 1)).to(t.device)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head cross-attention from spatial positions to text tokens.

    ``to_out`` is the finetunable projector; q/k/v stay frozen with the rest
    of the backbone.
    """

    def __init__(self, channels: int, text_dim: int):
        super().__init__()
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(text_dim, channels, bias=False)
        self.to_v = nn.Linear(text_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.scale = channels ** -0.5

    def forward(self, x, text, text_mask):
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k = self.to_k(text)
        v = self.to_v(text)
        scores = q @ k.transpose(1, 2) * self.scale
        scores = scores.masked_fill(~text_mask[:, None, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class ConditionalUNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.level_channels
        res = cfg.level_resolutions
        levels = len(chans)
        tdim = cfg.time_dim

        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(),
                                      nn.Linear(tdim, tdim))
        self.null_text = nn.Parameter(torch.zeros(1, cfg.text_dim))

        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        c_prev = chans[0]
        for i in range(levels):
            self.enc_blocks.append(ResBlock(c_prev, chans[i], tdim))
            self.enc_attn.append(
                CrossAttention(chans[i], cfg.text_dim)
                if res[i] in cfg.attn_resolutions else None)
            if i < levels - 1:
                self.downs.append(nn.Conv2d(chans[i], chans[i], 3, stride=2,
                                            padding=1))
            c_prev = chans[i]

        self.mid_block1 = ResBlock(chans[-1], chans[-1], tdim)
        self.mid_attn = CrossAttention(chans[-1], cfg.text_dim)
        self.mid_block2 = ResBlock(chans[-1], chans[-1], tdim)

        self.dec_blocks = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(levels)):
            self.dec_blocks.append(ResBlock(chans[i] * 2, chans[i], tdim))
            self.dec_attn.append(
                CrossAttention(chans[i], cfg.text_dim)
                if res[i] in cfg.attn_resolutions else None)
            if i > 0:
                self.ups.append(nn.Conv2d(chans[i], chans[i - 1], 3, padding=1))

        self.out_norm = _norm(chans[0])
        self.conv_out = nn.Conv2d(chans[0], cfg.in_channels, 3, padding=1)

    # -- conditioning helpers -------------------------------------------------

    def latent_features(self, z: torch.Tensor) -> torch.Tensor:
        """Lift a latent into the first-stage feature space (frozen conv).

        This is the latent-side input handed to the frequency refiner and to
        cross normalization, so their channel counts match the injection site.
        """
        return self.conv_in(z)

    def _text_memory(self, text_emb, batch: int, device):
        if text_emb is None:
            memory = self.null_text[None].expand(batch, 1, -1)
            mask = torch.ones(batch, 1, dtype=torch.bool, device=device)
            return memory, mask
        data = text_emb.data if isinstance(text_emb, EmbeddingMatrix) else text_emb
        lengths = text_emb.lengths if isinstance(text_emb, EmbeddingMatrix) \
            else [data.shape[1]] * data.shape[0]
        if data.shape[0] != batch:
            raise DimensionError(
                f"text batch {data.shape[0]} != latent batch {batch}")
        mask = torch.zeros(batch, data.shape[1], dtype=torch.bool, device=device)
        memory = data.clone()
        for i, n in enumerate(lengths):
            if n == 0:
                # empty prompt: attend to the learned null embedding instead
                memory[i, 0] = self.null_text[0]
                mask[i, 0] = True
            else:
                mask[i, :n] = True
        return memory, mask

    def _control_tensor(self, control, h: torch.Tensor) -> torch.Tensor:
        if isinstance(control, ControlFeature):
            if control.stage != "cross_normalized":
                raise ValidationError(
                    f"control must be cross_normalized, got {control.stage!r}")
            control = control.data
        if control.shape != h.shape:
            raise DimensionError(
                f"control shape {tuple(control.shape)} != injection "
                f"activations {tuple(h.shape)}")
        return control

    # -- forward --------------------------------------------------------------

    def forward(self, zt: torch.Tensor, t, text_emb=None, control=None):
        b = zt.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.long, device=zt.device)
        elif t.ndim == 0:
            t = t[None].expand(b)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(zt.dtype))
        memory, text_mask = self._text_memory(text_emb, b, zt.device)
        memory = memory.to(zt.dtype)

        h = self.conv_in(zt)
        skips = []
        levels = len(self.enc_blocks)
        for i in range(levels):
            h = self.enc_blocks[i](h, temb)
            if self.enc_attn[i] is not None:
                h = self.enc_attn[i](h, memory, text_mask)
            if i == 0 and control is not None:
                h = h + self.cfg.control_scale * self._control_tensor(control, h)
            skips.append(h)
            if i < levels - 1:
                h = self.downs[i](h)

        h = self.mid_block1(h, temb)
        h = self.mid_attn(h, memory, text_mask)
        h = self.mid_block2(h, temb)

        for j, i in enumerate(reversed(range(levels))):
            h = self.dec_blocks[j](torch.cat([h, skips[i]], dim=1), temb)
            if self.dec_attn[j] is not None:
                h = self.dec_attn[j](h, memory, text_mask)
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[j](h)

        return self.conv_out(F.silu(self.out_norm(h)))

    denoise = forward

    # -- parameter policy -----------------------------------------------------

    def param_tags(self) -> dict[str, str]:
        """Tag every parameter: cross-attention output projections vs frozen."""
        tags = {}
        for name, _ in self.named_parameters():
            if ".to_out." in name:
                tags[name] = "cross_attn_projectors"
            else:
                tags[name] = "frozen"
        return tags
