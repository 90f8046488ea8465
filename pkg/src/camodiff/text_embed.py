"""Deterministic hash-based text embedding provider.

Stands in for a pretrained text encoder: tokens hash into a fixed bucket
table, rows pick up positional offsets, and one frozen self-attention layer
mixes them. Scores derived from these embeddings are only internally
comparable; the provider exists to preserve the conditioning interface.
"""

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError

_TOKEN_RE = re.compile(r"[a-z0-9']+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, n_buckets: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % n_buckets


@dataclass(frozen=True)
class TextConfig:
    text_dim: int = 128
    max_tokens: int = 77
    vocab_buckets: int = 65536
    seed: int = 7

    def __post_init__(self):
        if self.text_dim < 1 or self.max_tokens < 1 or self.vocab_buckets < 1:
            raise ConfigurationError("text_dim, max_tokens, vocab_buckets must be >= 1")


@dataclass
class EmbeddingMatrix:
    """(batch, max_tokens, text_dim) conditioning rows; rows past a prompt's
    length are zero. ``empty`` flags prompts that produced no tokens."""

    data: torch.Tensor
    lengths: list[int]
    truncated: list[bool] = field(default_factory=list)
    empty: list[bool] = field(default_factory=list)


class HashTextEmbedder(nn.Module):
    """Frozen, seeded embedding stack; pure function of (config, prompt)."""

    def __init__(self, cfg: TextConfig = TextConfig()):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.text_dim
        scale = 1.0 / np.sqrt(d)

        def table(*shape):
            arr = rng.normal(0.0, scale, size=shape).astype(np.float32)
            return nn.Parameter(torch.from_numpy(arr), requires_grad=False)

        self.token_table = table(cfg.vocab_buckets, d)
        self.pos_table = table(cfg.max_tokens, d)
        self.w_q = table(d, d)
        self.w_k = table(d, d)
        self.w_v = table(d, d)
        self.w_out = table(d, d)

    @torch.no_grad()
    def embed(self, prompts: list[str]) -> EmbeddingMatrix:
        if not isinstance(prompts, (list, tuple)):
            raise ConfigurationError("prompts must be a list of strings")
        cfg = self.cfg
        out = torch.zeros(len(prompts), cfg.max_tokens, cfg.text_dim,
                          dtype=self.token_table.dtype)
        lengths, truncated, empty = [], [], []
        for i, prompt in enumerate(prompts):
            tokens = tokenize(prompt)
            truncated.append(len(tokens) > cfg.max_tokens)
            tokens = tokens[:cfg.max_tokens]
            empty.append(len(tokens) == 0)
            lengths.append(len(tokens))
            if not tokens:
                continue
            idx = torch.tensor([token_bucket(t, cfg.vocab_buckets) for t in tokens])
            rows = self.token_table[idx] + self.pos_table[:len(tokens)]
            out[i, :len(tokens)] = self._mix(rows)
        return EmbeddingMatrix(data=out, lengths=lengths,
                               truncated=truncated, empty=empty)

    def _mix(self, rows: torch.Tensor) -> torch.Tensor:
        # single-head self-attention over the prompt's own tokens
        q = rows @ self.w_q
        k = rows @ self.w_k
        v = rows @ self.w_v
        attn = torch.softmax(q @ k.T / np.sqrt(self.cfg.text_dim), dim=-1)
        return rows + (attn @ v) @ self.w_out

    def forward(self, prompts: list[str]) -> EmbeddingMatrix:
        return self.embed(prompts)
