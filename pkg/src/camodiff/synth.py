"""Procedural camouflage training pairs and folder ingestion.

Each synthetic sample is a textured background plus an object region that
re-renders the same texture family with a bounded intensity shift, so the
object genuinely blends in. Samples are pure functions of (config, index)
and round-trip losslessly through the on-disk folder layout
(images/*.png, masks/*.png, prompts.jsonl).
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .crdm.dialogue import PromptPair, read_prompt_pairs, write_prompt_pairs
from .errors import ConfigurationError, IngestionError

TEXTURE_KINDS = ("value_noise", "stripes", "blotch")
OBJECT_KINDS = ("ellipse", "metaball")
MASK_AREA_RANGE = (0.02, 0.60)
TEMPLATE_VLM_ID = "template-v1"

_CREATURES = {"ellipse": ("beetle", "toad", "moth", "stone grouse"),
              "metaball": ("octopus", "cuttlefish", "lichen spider", "leaf frog")}
_SURFACES = {"value_noise": "mottled forest floor",
             "stripes": "banded reed bed",
             "blotch": "patchy lichen rock"}


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    texture_kind: str = "value_noise"
    object_kind: str = "ellipse"
    contrast_delta: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.size not in (32, 64, 128):
            raise ConfigurationError(f"size={self.size} must be 32, 64, or 128")
        if self.texture_kind not in TEXTURE_KINDS:
            raise ConfigurationError(f"texture_kind={self.texture_kind!r}")
        if self.object_kind not in OBJECT_KINDS:
            raise ConfigurationError(f"object_kind={self.object_kind!r}")
        if not 0 <= self.contrast_delta <= 0.3:
            raise ConfigurationError(
                f"contrast_delta={self.contrast_delta} outside [0, 0.3]")


@dataclass
class TrainingSample:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray   # (H, W) bool
    prompts: PromptPair
    origin: str = "synthetic"
    background: np.ndarray | None = None  # quantized background, synthetic only
    placeholder_prompts: bool = False


@dataclass
class IngestResult:
    samples: list[TrainingSample]
    skipped: list[str]


# -- textures -------------------------------------------------------------------

def _upsample_grid(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upsample of a coarse random grid onto size x size pixels."""
    gh, gw = grid.shape
    ys = np.linspace(0, gh - 1, size)
    xs = np.linspace(0, gw - 1, size)
    y0 = np.floor(ys).astype(int).clip(0, gh - 2)
    x0 = np.floor(xs).astype(int).clip(0, gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g = grid
    top = g[y0][:, x0] * (1 - fx) + g[y0][:, x0 + 1] * fx
    bot = g[y0 + 1][:, x0] * (1 - fx) + g[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _texture_lum(rng: np.random.Generator, kind: str, size: int) -> np.ndarray:
    """Scalar texture field in [0, 1]."""
    if kind == "value_noise":
        coarse = _upsample_grid(rng.random((size // 8 + 2, size // 8 + 2)), size)
        fine = _upsample_grid(rng.random((size // 2 + 2, size // 2 + 2)), size)
        return 0.7 * coarse + 0.3 * fine
    if kind == "stripes":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(3, 8)
        phase = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:size, 0:size] / size
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))
                      + phase)
        return 0.5 + 0.5 * wave
    # blotch: soft-thresholded smooth noise
    field = _upsample_grid(rng.random((size // 8 + 2, size // 8 + 2)), size)
    return 1.0 / (1.0 + np.exp(-12.0 * (field - 0.5)))


def _texture_rgb(rng: np.random.Generator, kind: str, size: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.65, size=3)
    tint = rng.uniform(-0.12, 0.12, size=3)
    lum = _texture_lum(rng, kind, size)
    rgb = base[None, None] + (lum[..., None] - 0.5) * (0.5 + tint[None, None])
    return np.clip(rgb, 0.0, 1.0)


# -- object masks ----------------------------------------------------------------

def _object_mask(rng: np.random.Generator, kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    if kind == "ellipse":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        ay, ax = rng.uniform(0.10, 0.32, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    blobs = rng.integers(2, 5)
    field = np.zeros((size, size))
    for _ in range(blobs):
        cy, cx = rng.uniform(0.25, 0.75, size=2)
        r = rng.uniform(0.08, 0.2)
        field += r ** 2 / ((yy - cy) ** 2 + (xx - cx) ** 2 + 1e-6)
    return field > 1.0


def _masked_area_ok(mask: np.ndarray) -> bool:
    frac = mask.mean()
    return MASK_AREA_RANGE[0] <= frac <= MASK_AREA_RANGE[1]


# -- prompts ----------------------------------------------------------------------

def template_prompts(cfg: SynthConfig, rng: np.random.Generator,
                     source_image: str) -> PromptPair:
    creature = rng.choice(_CREATURES[cfg.object_kind])
    surface = _SURFACES[cfg.texture_kind]
    tone = rng.choice(("ochre", "olive", "ash gray", "rust brown", "sand"))
    t_detail = (f"A photorealistic scene of a {creature} resting on {surface}. "
                f"Its body repeats the {tone} tones and fine texture of the "
                "ground, so the shape almost dissolves into the surroundings.")
    t_simple = f"A {creature} blends into the {surface} around it."
    return PromptPair(t_detail=t_detail, t_simple=t_simple,
                      source_image=source_image, mode="camouflage",
                      outline_policy="none", vlm_id=TEMPLATE_VLM_ID)


# -- generation ---------------------------------------------------------------------

def synth_sample(cfg: SynthConfig, index: int) -> TrainingSample:
    """Deterministic sample i; independent of any other index."""
    rng = np.random.default_rng((cfg.seed, index))
    background = _texture_rgb(rng, cfg.texture_kind, cfg.size)
    perturb = 2.0 * _texture_lum(rng, cfg.texture_kind, cfg.size) - 1.0

    mask = _object_mask(rng, cfg.object_kind, cfg.size)
    tries = 0
    while not _masked_area_ok(mask):
        mask = _object_mask(rng, cfg.object_kind, cfg.size)
        tries += 1
        if tries > 200:
            raise ConfigurationError("mask area resampling did not converge")

    bg_u8 = np.round(background * 255.0).astype(np.uint8)
    # truncate toward zero so the per-pixel shift never exceeds contrast_delta
    shift = np.trunc(perturb * cfg.contrast_delta * 255.0).astype(np.int16)
    image = bg_u8.astype(np.int16)
    image[mask] = image[mask] + shift[mask][:, None]
    image = np.clip(image, 0, 255).astype(np.uint8)

    source = f"images/sample_{index:05d}.png"
    return TrainingSample(image=image, mask=mask,
                          prompts=template_prompts(cfg, rng, source),
                          origin="synthetic", background=bg_u8)


def generate(cfg: SynthConfig, n: int):
    """Yield n deterministic samples."""
    if n < 1:
        raise ConfigurationError(f"n={n} must be >= 1")
    for i in range(n):
        yield synth_sample(cfg, i)


# -- folder round-trip ----------------------------------------------------------------

def save_samples(samples, out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, sample in enumerate(samples):
        stem = Path(sample.prompts.source_image).stem or f"sample_{i:05d}"
        Image.fromarray(sample.image).save(out_dir / "images" / f"{stem}.png")
        Image.fromarray((sample.mask.astype(np.uint8)) * 255).save(
            out_dir / "masks" / f"{stem}.png")
        pairs.append(sample.prompts)
    write_prompt_pairs(pairs, out_dir / "prompts.jsonl")
    return out_dir


def ingest_folder(images_dir, masks_dir, prompts_file=None) -> IngestResult:
    """Pair images and masks by filename stem; join prompts by source stem.

    Unmatched stems land in the skipped report; missing prompt entries get
    template placeholders and a flag.
    """
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    if not images_dir.is_dir() or not masks_dir.is_dir():
        raise IngestionError(f"missing directory: {images_dir} or {masks_dir}")
    image_paths = {p.stem: p for p in sorted(images_dir.glob("*.png"))}
    mask_paths = {p.stem: p for p in sorted(masks_dir.glob("*.png"))}

    prompt_by_stem = {}
    if prompts_file is not None:
        for pair in read_prompt_pairs(prompts_file):
            prompt_by_stem[Path(pair.source_image).stem] = pair

    skipped = sorted(set(image_paths) ^ set(mask_paths))
    samples = []
    for stem in sorted(set(image_paths) & set(mask_paths)):
        try:
            with Image.open(image_paths[stem]) as img:
                image = np.asarray(img.convert("RGB"))
            with Image.open(mask_paths[stem]) as m:
                mask = np.asarray(m.convert("L")) >= 128
        except Exception as exc:
            raise IngestionError(f"unreadable file for stem {stem!r}: {exc}") from exc
        pair = prompt_by_stem.get(stem)
        placeholder = pair is None
        if placeholder:
            pair = PromptPair(
                t_detail=f"A camouflaged subject hides in the scene of {stem}.",
                t_simple="A camouflaged subject hides in the scene.",
                source_image=f"images/{stem}.png", mode="camouflage",
                outline_policy="none", vlm_id=TEMPLATE_VLM_ID)
        samples.append(TrainingSample(image=image, mask=mask, prompts=pair,
                                      origin="folder",
                                      placeholder_prompts=placeholder))
    return IngestResult(samples=samples, skipped=skipped)
