"""Forward noising and the DDIM reverse sampler with step skipping.

All operations are pure given their inputs and work on torch tensors,
numpy arrays, or plain floats alike; schedule constants enter as python
floats so autograd graphs pass through untouched.
"""

import json
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, NumericalDomainError, SamplerConfigError
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 20
    eta: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class TimingReport:
    latency_s: float
    fps: float
    sps: float

    def to_json(self) -> str:
        return json.dumps({"latency_s": self.latency_s, "fps": self.fps,
                           "sps": self.sps})


def _check_shapes(a, b, what: str):
    sa = getattr(a, "shape", ())
    sb = getattr(b, "shape", ())
    if tuple(sa) != tuple(sb):
        raise DimensionError(f"{what}: shape {tuple(sa)} != {tuple(sb)}")


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    t = -1 is the clean boundary and returns x0 unchanged.
    """
    _check_shapes(x0, eps, "q_sample")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(xt, eps_pred, t: int, sched: NoiseSchedule):
    """Invert the forward process at step t given a noise prediction."""
    _check_shapes(xt, eps_pred, "predict_x0")
    ab = sched.alpha_bar(t)
    if ab < 1e-8:
        raise NumericalDomainError(f"alpha_bar({t})={ab:.3e} below 1e-8")
    return (xt - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def _fresh_noise(like, seed: int, rng=None):
    if torch.is_tensor(like):
        g = rng if isinstance(rng, torch.Generator) else torch.Generator(
            device=like.device).manual_seed(seed)
        return torch.randn(like.shape, generator=g, dtype=like.dtype,
                           device=like.device)
    g = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(seed)
    noise = g.standard_normal(size=np.shape(like))
    return noise if np.shape(like) else float(noise)


def ddim_step(xt, eps_pred, t: int, t_prev: int, cfg: SamplerConfig,
              sched: NoiseSchedule, rng=None):
    """One reverse step from t to t_prev (t_prev may skip steps, or be -1).

    Deterministic when eta = 0. For eta > 0 the fresh-noise term is drawn
    from ``rng`` when given, else from a one-shot generator seeded with
    ``cfg.seed``.
    """
    if t_prev >= t:
        raise SamplerConfigError(f"t_prev={t_prev} must be < t={t}")
    if cfg.eta < 0:
        raise SamplerConfigError(f"eta={cfg.eta} must be >= 0")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)

    x0p = predict_x0(xt, eps_pred, t, sched)
    delta = cfg.eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) \
        * math.sqrt(1.0 - ab_t / ab_prev)
    remainder = 1.0 - ab_prev - delta ** 2
    if remainder < 0:
        raise SamplerConfigError(
            f"1 - alpha_bar(t_prev) - delta^2 = {remainder:.3e} < 0 "
            f"(t={t}, t_prev={t_prev}, eta={cfg.eta})")

    out = math.sqrt(ab_prev) * x0p + math.sqrt(remainder) * eps_pred
    if cfg.eta > 0:
        out = out + delta * _fresh_noise(xt, cfg.seed, rng)
    return out


def timestep_sequence(T: int, num_steps: int) -> np.ndarray:
    """Evenly spaced descending timesteps from T-1 to 0 inclusive."""
    if not 1 <= num_steps <= T:
        raise SamplerConfigError(f"num_steps={num_steps} outside [1, T={T}]")
    if num_steps == 1:
        return np.array([T - 1], dtype=np.int64)
    return np.round(np.linspace(T - 1, 0, num_steps)).astype(np.int64)


def sample_loop(denoiser, shape, prompt_embedding, control,
                cfg: SamplerConfig, sched: NoiseSchedule):
    """Run the reverse chain from standard-normal noise.

    ``denoiser(z_t, t, prompt_embedding, control)`` must return a noise
    prediction of z_t's shape. Returns (z0, TimingReport); the final step
    targets the virtual clean boundary t = -1.
    """
    g = torch.Generator().manual_seed(cfg.seed)
    z = torch.randn(shape, generator=g)
    ts = timestep_sequence(sched.T, cfg.num_steps)

    start = time.perf_counter()
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
        eps = denoiser(z, int(t), prompt_embedding, control)
        if not torch.is_tensor(eps) or tuple(eps.shape) != tuple(z.shape):
            raise DimensionError(
                f"denoiser returned shape {getattr(eps, 'shape', None)}, "
                f"expected {tuple(z.shape)} at t={int(t)}")
        z = ddim_step(z, eps, int(t), t_prev, cfg, sched, rng=g)
    latency = max(time.perf_counter() - start, 1e-9)

    report = TimingReport(latency_s=latency,
                          fps=shape[0] / latency,
                          sps=cfg.num_steps / latency)
    return z, report
