"""Training loop: combined noise-prediction and perceptual loss, two
learning-rate groups over the finetuning policy, and epoch checkpoints."""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .codec import decode_latent, encode_latent
from .diffusion import q_sample
from .errors import ConfigurationError, DimensionError, TrainingDivergedError
from .pipeline import Pipeline
from .pyramid import shared_pyramid
from .synth import TrainingSample


@dataclass(frozen=True)
class PerceptualConfig:
    layer_ids: tuple[int, ...] = (0, 1, 2)
    gammas: tuple[float, ...] = (1.0, 1.0, 1.0)
    extractor: str = "tiny_fixed"

    def __post_init__(self):
        if len(self.layer_ids) != len(self.gammas):
            raise ConfigurationError("layer_ids and gammas lengths differ")
        if any(g < 0 for g in self.gammas):
            raise ConfigurationError("gammas must be >= 0")
        if self.extractor != "tiny_fixed":
            raise ConfigurationError(f"unknown extractor {self.extractor!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr_controller_firm: float = 1e-4
    lr_projectors: float = 5e-6
    lambda_lpips: float = 1e-3
    batch_size: int = 4
    control_scale: float = 1.2
    epochs: int = 1
    seed: int = 0
    codec: str = "identity"
    max_steps: int | None = None
    # Brief unconditional warm-up of the full denoiser before the policy
    # training. Stands in for the pretrained diffusion backbone that the
    # finetuning policy presumes; without it the frozen trunk is a random
    # map and the finetune has nothing to adapt.
    backbone_warmup_steps: int = 0
    backbone_warmup_lr: float = 1e-3

    def __post_init__(self):
        if self.lr_controller_firm <= 0 or self.lr_projectors <= 0:
            raise ConfigurationError("learning rates must be > 0")
        if self.lambda_lpips < 0:
            raise ConfigurationError("lambda_lpips must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if self.backbone_warmup_steps < 0 or self.backbone_warmup_lr <= 0:
            raise ConfigurationError(
                "backbone_warmup_steps must be >= 0 and backbone_warmup_lr > 0")
        if self.max_steps is not None and self.max_steps <= self.backbone_warmup_steps:
            raise ConfigurationError(
                f"max_steps={self.max_steps} must exceed "
                f"backbone_warmup_steps={self.backbone_warmup_steps}")


def lpips_loss(x_pred: torch.Tensor, x_ref: torch.Tensor,
               cfg: PerceptualConfig = PerceptualConfig(),
               features_fn=None) -> torch.Tensor:
    """Per-layer mean squared feature distance with per-layer scales.

    For each selected layer: mean over spatial positions of the squared
    channel norm of gamma * (f_pred - f_ref), summed over layers, averaged
    over the batch.
    """
    if x_pred.shape != x_ref.shape:
        raise DimensionError(f"{tuple(x_pred.shape)} vs {tuple(x_ref.shape)}")
    if features_fn is None:
        features_fn = shared_pyramid().features
    f_pred = features_fn(x_pred)
    f_ref = features_fn(x_ref)
    total = 0.0
    for gamma, layer in zip(cfg.gammas, cfg.layer_ids):
        diff = gamma * (f_pred[layer] - f_ref[layer])
        total = total + diff.square().sum(dim=1).mean(dim=(-2, -1))
    return total.mean()


def collate(samples: list[TrainingSample]):
    """Stack samples into ([-1,1] float images, {0,1} masks, detail prompts)."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    images = torch.from_numpy(images).permute(0, 3, 1, 2) / 127.5 - 1.0
    masks = torch.from_numpy(
        np.stack([s.mask for s in samples]).astype(np.float32))[:, None]
    prompts = [s.prompts.t_detail for s in samples]
    ids = [Path(s.prompts.source_image).stem for s in samples]
    return images, masks, prompts, ids


class Trainer:
    """Single-writer optimizer over the paper-policy parameter groups."""

    def __init__(self, pipeline: Pipeline, cfg: TrainConfig = TrainConfig(),
                 perceptual: PerceptualConfig = PerceptualConfig()):
        self.pipeline = pipeline
        self.cfg = cfg
        self.perceptual = perceptual
        pipeline.apply_policy("paper_policy")

        tags = pipeline.param_tags()
        params = pipeline.trainable_parameters("paper_policy")
        group_cf = [p for n, p in params.items() if tags[n] == "controller_firm"]
        group_proj = [p for n, p in params.items()
                      if tags[n] == "cross_attn_projectors"]
        self.optimizer = torch.optim.AdamW(
            [{"params": group_cf, "lr": cfg.lr_controller_firm},
             {"params": group_proj, "lr": cfg.lr_projectors}],
            betas=(0.9, 0.999))
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.step_count = 0
        self.features_fn = None  # override for non-default perceptual extractors

    @property
    def lr_groups(self) -> dict[str, float]:
        return {"controller_firm": self.cfg.lr_controller_firm,
                "cross_attn_projectors": self.cfg.lr_projectors}

    def compute_losses(self, images: torch.Tensor, masks: torch.Tensor,
                       prompts: list[str], t, eps: torch.Tensor):
        """Loss parts for a fixed draw of (t, eps); returns tensors
        (l_sd, l_lpips, total) still attached to the autograd graph.

        ``t`` is one timestep or one per sample; the per-sample form is the
        batched composition of the scalar forward/inversion formulas.
        """
        pipe = self.pipeline
        sched = pipe.schedule
        z0 = encode_latent(images, self.cfg.codec)
        ts = [int(t)] * z0.shape[0] if np.isscalar(t) else [int(v) for v in t]
        ab = torch.tensor([sched.alpha_bar(v) for v in ts], dtype=z0.dtype)
        ab = ab.view(-1, *([1] * (z0.ndim - 1)))
        zt = ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps

        control = pipe.control_features(masks, zt)
        emb = pipe.embed(prompts)
        eps_pred = pipe.denoise(zt, torch.tensor(ts), emb, control)

        l_sd = (eps_pred - eps).square().mean()
        if self.cfg.lambda_lpips > 0:
            x0_pred = (zt - (1.0 - ab).sqrt() * eps_pred) / ab.sqrt()
            x0_pred = decode_latent(x0_pred, self.cfg.codec).clamp(-1.0, 1.0)
            l_lpips = lpips_loss(x0_pred, images, self.perceptual,
                                 features_fn=self.features_fn)
        else:
            l_lpips = torch.zeros((), dtype=images.dtype)
        total = l_sd + self.cfg.lambda_lpips * l_lpips
        return l_sd, l_lpips, total

    def training_step(self, batch: list[TrainingSample],
                      rng: torch.Generator | None = None) -> dict[str, float]:
        """One optimization step; returns the loss parts.

        Draws per-sample timesteps and noise, runs the control path against
        the noisy latent, and steps both learning-rate groups on
        l_sd + lambda * l_lpips.
        """
        rng = rng or self.rng
        images, masks, prompts, ids = collate(batch)
        t = torch.randint(0, self.pipeline.schedule.T, (images.shape[0],),
                          generator=rng).tolist()
        eps = torch.randn(encode_latent(images, self.cfg.codec).shape,
                          generator=rng)
        l_sd, l_lpips, total = self.compute_losses(images, masks, prompts, t, eps)

        parts = {"l_sd": float(l_sd.detach()),
                 "l_lpips": float(l_lpips.detach()),
                 "total": float(total.detach())}
        if not all(math.isfinite(v) for v in parts.values()):
            raise TrainingDivergedError(
                f"non-finite loss at step {self.step_count}",
                diagnostics={"t": t, "batch_ids": ids, **parts})

        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.step_count += 1
        return parts


def pretrain_backbone(pipeline: Pipeline, samples: list[TrainingSample],
                      steps: int, lr: float = 1e-3, batch_size: int = 4,
                      seed: int = 0, log_path=None) -> list[float]:
    """Unconditional denoiser warm-up: every denoiser parameter trains on the
    plain noise-prediction objective, with no control path and the null text
    embedding. The result plays the role of the pretrained backbone; freeze
    it by constructing a Trainer (which applies the finetuning policy)."""
    for p in pipeline.denoiser.parameters():
        p.requires_grad_(True)
    optimizer = torch.optim.AdamW(pipeline.denoiser.parameters(), lr=lr)
    rng = torch.Generator().manual_seed(seed)
    order_rng = np.random.default_rng(seed)
    sched = pipeline.schedule
    codec = pipeline.cfg.codec

    losses: list[float] = []
    log = open(log_path, "w") if log_path is not None else None
    try:
        while len(losses) < steps:
            order = order_rng.permutation(len(samples))
            for start in range(0, len(samples), batch_size):
                batch = [samples[i] for i in order[start:start + batch_size]]
                images, _, _, _ = collate(batch)
                t = int(torch.randint(0, sched.T, (1,), generator=rng).item())
                z0 = encode_latent(images, codec)
                eps = torch.randn(z0.shape, generator=rng)
                zt = q_sample(z0, t, eps, sched)
                loss = (pipeline.denoiser(zt, t, None, None) - eps).square().mean()
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))
                if log is not None:
                    log.write(json.dumps({"step": len(losses),
                                          "l_sd": losses[-1]}) + "\n")
                if len(losses) >= steps:
                    break
    finally:
        if log is not None:
            log.close()
    return losses


def train(pipeline: Pipeline, samples: list[TrainingSample],
          cfg: TrainConfig, out_dir,
          perceptual: PerceptualConfig = PerceptualConfig(),
          log_every: int = 1) -> dict:
    """Run the full desk-scale training: optional backbone warm-up followed
    by the finetuning-policy loop, logged as one run with a single step
    counter. Deterministic batch order, JSONL loss log, a checkpoint after
    every finetune epoch plus a final one. ``cfg.max_steps`` bounds the
    total number of optimizer steps across both phases."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.jsonl"
    losses = []
    step = 0
    max_steps = cfg.max_steps if cfg.max_steps is not None else math.inf

    with open(log_path, "w") as log:

        def record(parts: dict, phase: str, lr_groups: dict):
            nonlocal step
            step += 1
            entry = {"step": step, "phase": phase, **parts,
                     "lr_groups": lr_groups}
            losses.append(entry)
            if step % log_every == 0:
                log.write(json.dumps(entry) + "\n")

        if cfg.backbone_warmup_steps:
            warmup = pretrain_backbone(pipeline, samples,
                                       cfg.backbone_warmup_steps,
                                       lr=cfg.backbone_warmup_lr,
                                       batch_size=cfg.batch_size,
                                       seed=cfg.seed + 1)
            for l_sd in warmup:
                record({"l_sd": l_sd, "l_lpips": 0.0, "total": l_sd},
                       "backbone_warmup", {"backbone": cfg.backbone_warmup_lr})

        trainer = Trainer(pipeline, cfg, perceptual)
        done = False
        order_rng = np.random.default_rng(cfg.seed)
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(len(samples))
            for start in range(0, len(samples), cfg.batch_size):
                batch = [samples[i] for i in order[start:start + cfg.batch_size]]
                record(trainer.training_step(batch), "finetune",
                       trainer.lr_groups)
                if step >= max_steps:
                    done = True
                    break
            pipeline.save(out_dir / f"ckpt_epoch{epoch:03d}.ctcg")
            if done:
                break

    final = pipeline.save(out_dir / "ckpt_final.ctcg")
    return {"checkpoint": final, "log": log_path, "steps": step,
            "losses": losses}
