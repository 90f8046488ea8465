"""Desk-scale controllable text-guided camouflage image diffusion."""

__version__ = "0.1.0"

from .codec import decode_latent, encode_latent
from .control import (ChannelStats, ControlFeature, ControllerConfig,
                      MaskController, channel_stats, cross_normalize)
from .denoiser import ConditionalUNet, DenoiserConfig
from .diffusion import (SamplerConfig, TimingReport, ddim_step, predict_x0,
                        q_sample, sample_loop)
from .firm import FirmConfig, FrequencyRefiner, fft_shift, ifft_shift
from .metrics import EmbeddingSet, MetricReport, clip_score, embed_images, fid, kid
from .pipeline import Pipeline, PipelineConfig
from .schedule import NoiseSchedule, make_schedule
from .synth import SynthConfig, TrainingSample, generate, ingest_folder
from .text_embed import EmbeddingMatrix, HashTextEmbedder, TextConfig
from .training import (PerceptualConfig, TrainConfig, Trainer, lpips_loss,
                       pretrain_backbone, train)

__all__ = [
    "ChannelStats", "ConditionalUNet", "ControlFeature", "ControllerConfig",
    "DenoiserConfig", "EmbeddingMatrix", "EmbeddingSet", "FirmConfig",
    "FrequencyRefiner", "HashTextEmbedder", "MaskController", "MetricReport",
    "NoiseSchedule", "PerceptualConfig", "Pipeline", "PipelineConfig",
    "SamplerConfig", "SynthConfig", "TextConfig", "TimingReport", "TrainConfig",
    "Trainer", "TrainingSample", "channel_stats", "clip_score", "cross_normalize",
    "ddim_step", "decode_latent", "embed_images", "encode_latent", "fft_shift",
    "fid", "generate", "ifft_shift", "ingest_folder", "kid", "lpips_loss",
    "make_schedule", "predict_x0", "pretrain_backbone", "q_sample",
    "sample_loop", "train",
]
