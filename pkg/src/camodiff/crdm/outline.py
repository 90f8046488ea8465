"""Semi-transparent colored outline annotation along mask boundaries."""

import numpy as np
from scipy import ndimage

from ..errors import ConfigurationError, DimensionError, ValidationError

# Evenly spaced fully saturated hues (HSV v=1, s=1), as uint8 RGB.
_PALETTE_HUES = 12


def _palette() -> np.ndarray:
    colors = []
    for i in range(_PALETTE_HUES):
        h = i / _PALETTE_HUES * 6.0
        x = 1.0 - abs(h % 2.0 - 1.0)
        rgb = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)][int(h) % 6]
        colors.append([round(255 * v) for v in rgb])
    return np.asarray(colors, dtype=np.uint8)


PALETTE = _palette()


def boundary_band(mask: np.ndarray, width: int) -> np.ndarray:
    """Morphological gradient band: dilation minus erosion with a square
    structuring element of radius ``width``."""
    footprint = np.ones((2 * width + 1, 2 * width + 1), dtype=bool)
    grown = ndimage.binary_dilation(mask, structure=footprint)
    shrunk = ndimage.binary_erosion(mask, structure=footprint)
    return grown & ~shrunk


def annotate_outline(image: np.ndarray, mask: np.ndarray, width: int = 2,
                     alpha: float = 0.5, color_seed: int = 0) -> np.ndarray:
    """Blend a random saturated color over the mask's boundary band.

    Pixels outside the band are returned bit-identical to the input.
    """
    image = np.asarray(image)
    mask = np.asarray(mask).astype(bool)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"image must be (H, W, 3), got {image.shape}")
    if mask.shape != image.shape[:2]:
        raise DimensionError(
            f"mask {mask.shape} does not match image {image.shape[:2]}")
    if width < 1:
        raise ConfigurationError(f"width={width} must be >= 1")
    if not 0 < alpha <= 1:
        raise ConfigurationError(f"alpha={alpha} must be in (0, 1]")
    if not mask.any():
        raise ValidationError("mask is empty; nothing to outline")

    band = boundary_band(mask, width)
    rng = np.random.default_rng(color_seed)
    color = PALETTE[rng.integers(len(PALETTE))].astype(np.float64)

    out = image.copy()
    blended = (1.0 - alpha) * image[band].astype(np.float64) + alpha * color
    out[band] = np.clip(np.round(blended), 0, 255).astype(image.dtype)
    return out
