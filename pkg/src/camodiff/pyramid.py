"""Frozen, seeded multi-scale convolutional feature pyramid.

One fixed network serves two roles: spatial feature stacks for the
perceptual training loss, and pooled 192-d image embeddings for the
evaluation metrics. Weights are generated from a pinned seed via numpy's
stable PCG64 stream, so the extractor is identical across processes,
machines, and releases.
"""

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PYRAMID_SEED = 428600217
STAGE_CHANNELS = (32, 64, 96)
EMBED_DIM = sum(STAGE_CHANNELS)  # 192
EMBED_INPUT_SIZE = 64


class FrozenFeaturePyramid(nn.Module):
    """Three stride-2 conv stages over images in [-1, 1], (B, 3, H, W)."""

    def __init__(self):
        super().__init__()
        rng = np.random.default_rng(PYRAMID_SEED)
        c_in = 3
        self.convs = nn.ModuleList()
        for c_out in STAGE_CHANNELS:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            fan_in = c_in * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(c_out, c_in, 3, 3)).astype(np.float32)
            b = rng.normal(0.0, 0.05, size=(c_out,)).astype(np.float32)
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(w))
                conv.bias.copy_(torch.from_numpy(b))
            self.convs.append(conv)
            c_in = c_out
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage activation maps (gradients flow w.r.t. the input)."""
        feats = []
        h = x
        for conv in self.convs:
            h = F.silu(conv(h))
            feats.append(h)
        return feats

    @torch.no_grad()
    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled (B, 192) embedding: global average of every stage."""
        pooled = [f.mean(dim=(-2, -1)) for f in self.features(x)]
        return torch.cat(pooled, dim=-1)


_shared: FrozenFeaturePyramid | None = None


def shared_pyramid() -> FrozenFeaturePyramid:
    global _shared
    if _shared is None:
        _shared = FrozenFeaturePyramid()
    return _shared
