"""Noise schedules: per-timestep retention constants for forward diffusion."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

SCHEDULE_KINDS = ("linear_beta", "cosine")

DEFAULT_BETA_RANGE = (1e-4, 0.02)
DEFAULT_T = 1000


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables of alpha_t and their running products alpha_bar_t.

    ``alphas[t]`` is the single-step signal retention at step t and
    ``alpha_bars[t]`` the cumulative product up to and including t.
    Step -1 is the clean-data boundary and resolves to alpha_bar = 1,
    so the last reverse step of a sampler lands on a clean prediction.
    """

    T: int
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str

    def alpha_bar(self, t: int) -> float:
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise ConfigurationError(f"timestep t={t} outside [-1, {self.T})")
        return float(self.alpha_bars[t])

    def alpha(self, t: int) -> float:
        if not 0 <= t < self.T:
            raise ConfigurationError(f"timestep t={t} outside [0, {self.T})")
        return float(self.alphas[t])

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas


def _cosine_alpha_bars(T: int, s: float = 0.008) -> np.ndarray:
    grid = (np.arange(T + 1, dtype=np.float64) / T + s) / (1 + s) * math.pi / 2
    f = np.cos(grid) ** 2
    return f[1:] / f[0]


def make_schedule(kind: str, T: int = DEFAULT_T,
                  beta_range: tuple[float, float] = DEFAULT_BETA_RANGE) -> NoiseSchedule:
    """Build a noise schedule of the given kind.

    ``linear_beta`` interpolates betas linearly over ``beta_range``;
    ``cosine`` derives betas from a squared-cosine retention curve
    (betas clipped at 0.999) and ignores ``beta_range``.
    """
    if kind not in SCHEDULE_KINDS:
        raise ConfigurationError(f"kind={kind!r} not one of {SCHEDULE_KINDS}")
    if not isinstance(T, int) or T < 2:
        raise ConfigurationError(f"T={T!r} must be an integer >= 2")

    if kind == "linear_beta":
        beta_min, beta_max = beta_range
        if not 0 < beta_min < beta_max < 1:
            raise ConfigurationError(
                f"beta_range={beta_range!r} must satisfy 0 < beta_min < beta_max < 1")
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    else:
        bars = _cosine_alpha_bars(T)
        ratios = bars / np.concatenate(([1.0], bars[:-1]))
        betas = np.clip(1.0 - ratios, 0.0, 0.999)

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, alphas=alphas, alpha_bars=alpha_bars, kind=kind)
