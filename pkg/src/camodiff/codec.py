"""Lossless latent codecs standing in for a learned autoencoder.

``identity`` keeps the RGB tensor as-is; ``patchify4`` is an exact
space-to-depth by factor 4 (3 x H x W -> 48 x H/4 x W/4). Both are
invertible bit-for-bit, which keeps the image-domain perceptual loss
meaningful at desk scale.
"""

import torch

from .errors import ConfigurationError, DimensionError

CODECS = ("identity", "patchify4")
_PATCH = 4


def _check(codec: str):
    if codec not in CODECS:
        raise ConfigurationError(f"codec={codec!r} not one of {CODECS}")


def latent_channels(codec: str, image_channels: int = 3) -> int:
    _check(codec)
    return image_channels if codec == "identity" else image_channels * _PATCH * _PATCH


def latent_size(image_size: int, codec: str) -> int:
    _check(codec)
    if codec == "identity":
        return image_size
    if image_size % _PATCH != 0:
        raise DimensionError(f"image_size={image_size} not divisible by {_PATCH}")
    return image_size // _PATCH


def encode_latent(x: torch.Tensor, codec: str) -> torch.Tensor:
    """(B, C, H, W) image batch in [-1, 1] -> latent."""
    _check(codec)
    if codec == "identity":
        return x
    b, c, h, w = x.shape
    if h % _PATCH or w % _PATCH:
        raise DimensionError(f"spatial dims {(h, w)} not divisible by {_PATCH}")
    z = x.reshape(b, c, h // _PATCH, _PATCH, w // _PATCH, _PATCH)
    return z.permute(0, 1, 3, 5, 2, 4).reshape(b, c * _PATCH * _PATCH,
                                               h // _PATCH, w // _PATCH)


def decode_latent(z: torch.Tensor, codec: str) -> torch.Tensor:
    """Exact inverse of :func:`encode_latent`."""
    _check(codec)
    if codec == "identity":
        return z
    b, cz, h, w = z.shape
    if cz % (_PATCH * _PATCH):
        raise DimensionError(f"latent channels {cz} not divisible by {_PATCH * _PATCH}")
    c = cz // (_PATCH * _PATCH)
    x = z.reshape(b, c, _PATCH, _PATCH, h, w)
    return x.permute(0, 1, 4, 2, 5, 3).reshape(b, c, h * _PATCH, w * _PATCH)
