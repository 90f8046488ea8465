"""Distribution and alignment metrics over pluggable embedding providers.

FID is the Frechet distance between Gaussian fits of two embedding sets,
KID the unbiased polynomial-kernel MMD^2 averaged over random subsets, and
the clip-style score a scaled clamped cosine between paired image and text
embeddings. The bundled ``tiny_fixed`` provider is the frozen seeded
pyramid; absolute values are not comparable to scores from pretrained
encoders, but orderings and zero-distance properties are.
"""

import base64
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, DimensionError, ValidationError
from .pyramid import EMBED_DIM, EMBED_INPUT_SIZE, shared_pyramid
from .text_embed import token_bucket, tokenize

PROVIDERS = ("tiny_fixed", "external")
KID_DEFAULT_SUBSETS = 10
KID_DEFAULT_SEED = 0
CLIP_WEIGHT = 2.5

_TEXT_TABLE_BUCKETS = 8192


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # (n, d) float64
    provider_id: str
    item_ids: list[str]
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DimensionError(f"vectors must be (n, d), got {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise ValidationError("embedding vectors contain non-finite entries")
        if len(self.item_ids) != self.vectors.shape[0]:
            raise ValidationError(
                f"{len(self.item_ids)} item_ids for {self.vectors.shape[0]} vectors")


@dataclass
class MetricReport:
    fid: float | None
    kid: float | None
    clip_score: float | None
    n_real: int
    n_fake: int
    provider_id: str

    def to_json(self) -> str:
        return json.dumps({"fid": self.fid, "kid": self.kid,
                           "clip_score": self.clip_score,
                           "n_real": self.n_real, "n_fake": self.n_fake,
                           "provider_id": self.provider_id})


def _check_pair(a: EmbeddingSet, b: EmbeddingSet, min_n: int = 2):
    if a.provider_id != b.provider_id:
        raise ValidationError(
            f"provider mismatch: {a.provider_id!r} vs {b.provider_id!r}")
    if a.vectors.shape[1] != b.vectors.shape[1]:
        raise DimensionError(
            f"dimension mismatch: {a.vectors.shape[1]} vs {b.vectors.shape[1]}")
    if a.vectors.shape[0] < min_n or b.vectors.shape[0] < min_n:
        raise ValidationError(f"need at least {min_n} vectors per set")


def fid(real: EmbeddingSet, fake: EmbeddingSet) -> float:
    """Frechet distance between Gaussian fits of the two sets.

    The trace cross term uses the eigenvalues of the symmetrized product
    sqrt(S1) S2 sqrt(S1); eigenvalues below zero are clamped, with a warning
    when they dip beyond -1e-6 (the classic sqrtm numerical hazard).
    """
    _check_pair(real, fake)
    x, y = real.vectors, fake.vectors
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    cov_x = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    cov_y = np.cov(y, rowvar=False).reshape(y.shape[1], y.shape[1])

    evals_x, evecs_x = np.linalg.eigh(cov_x)
    sqrt_x = (evecs_x * np.sqrt(np.clip(evals_x, 0, None))) @ evecs_x.T
    prod = sqrt_x @ cov_y @ sqrt_x
    evals = np.linalg.eigvalsh((prod + prod.T) / 2.0)
    if evals.min() < -1e-6:
        warnings.warn(f"clamping negative sqrtm eigenvalue {evals.min():.3e}",
                      RuntimeWarning)
    tr_cross = 2.0 * np.sqrt(np.clip(evals, 0, None)).sum()

    diff = mu_x - mu_y
    return float(diff @ diff + np.trace(cov_x) + np.trace(cov_y) - tr_cross)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(real: EmbeddingSet, fake: EmbeddingSet, subset_size: int | None = None,
        n_subsets: int = KID_DEFAULT_SUBSETS, seed: int = KID_DEFAULT_SEED) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel, averaged over subsets.

    Within-set sums exclude the diagonal; the cross term uses all pairs.
    Slightly negative values are possible (unbiased estimator).
    """
    _check_pair(real, fake)
    n = min(real.vectors.shape[0], fake.vectors.shape[0])
    if subset_size is None:
        subset_size = min(n, 100)
    if subset_size > n:
        raise ValidationError(f"subset_size={subset_size} exceeds set size {n}")
    if subset_size < 2:
        raise ValidationError("subset_size must be >= 2")

    rng = np.random.default_rng(seed)
    m = subset_size
    values = []
    for _ in range(n_subsets):
        xs = real.vectors[rng.choice(real.vectors.shape[0], m, replace=False)]
        ys = fake.vectors[rng.choice(fake.vectors.shape[0], m, replace=False)]
        k_xx = _poly_kernel(xs, xs)
        k_yy = _poly_kernel(ys, ys)
        k_xy = _poly_kernel(xs, ys)
        term_x = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
        term_y = (k_yy.sum() - np.trace(k_yy)) / (m * (m - 1))
        values.append(term_x + term_y - 2.0 * k_xy.mean())
    return float(np.mean(values))


def clip_score(image_embs: EmbeddingSet, text_embs: EmbeddingSet,
               weight: float = CLIP_WEIGHT) -> float:
    """Mean of weight * max(0, cosine) over aligned image/text pairs."""
    _check_pair(image_embs, text_embs, min_n=1)
    if image_embs.item_ids != text_embs.item_ids:
        for i, (a, b) in enumerate(zip(image_embs.item_ids, text_embs.item_ids)):
            if a != b:
                raise ValidationError(f"item_ids diverge at index {i}: {a!r} vs {b!r}")
        raise ValidationError(
            f"item count mismatch: {len(image_embs.item_ids)} vs "
            f"{len(text_embs.item_ids)}")
    x, y = image_embs.vectors, text_embs.vectors
    norms = np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1)
    cos = np.where(norms > 0, (x * y).sum(axis=1) / np.where(norms > 0, norms, 1.0), 0.0)
    return float(np.mean(weight * np.clip(cos, 0.0, None)))


# -- embedding providers ------------------------------------------------------

def _load_image_tensor(path: Path, size: int = EMBED_INPUT_SIZE) -> torch.Tensor:
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return torch.from_numpy(arr * 2.0 - 1.0).permute(2, 0, 1)


def embed_images(directory, provider: str = "tiny_fixed",
                 endpoint=None, batch_size: int = 32) -> EmbeddingSet:
    """Embed every PNG in a directory; unreadable files are skipped and listed.

    ``tiny_fixed`` runs the frozen pyramid locally; ``external`` posts
    data-URL payloads to an HTTP embeddings endpoint.
    """
    if provider not in PROVIDERS:
        raise ConfigurationError(f"provider={provider!r} not one of {PROVIDERS}")
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise ValidationError(f"no .png files in {directory}")

    if provider == "external":
        return _embed_images_external(paths, endpoint, batch_size)

    pyramid = shared_pyramid()
    vectors, ids, skipped = [], [], []
    for start in range(0, len(paths), batch_size):
        chunk, chunk_ids = [], []
        for p in paths[start:start + batch_size]:
            try:
                chunk.append(_load_image_tensor(p))
                chunk_ids.append(p.stem)
            except Exception:
                skipped.append(p.name)
        if chunk:
            vectors.append(pyramid.embed(torch.stack(chunk)).numpy())
            ids.extend(chunk_ids)
    if not ids:
        raise ValidationError(f"no readable images in {directory}")
    return EmbeddingSet(vectors=np.concatenate(vectors), provider_id="tiny_fixed",
                        item_ids=ids, skipped=skipped)


_text_table: np.ndarray | None = None


def _tiny_text_table() -> np.ndarray:
    global _text_table
    if _text_table is None:
        from .pyramid import PYRAMID_SEED
        rng = np.random.default_rng(PYRAMID_SEED + 1)
        _text_table = rng.normal(0.0, 1.0 / np.sqrt(EMBED_DIM),
                                 size=(_TEXT_TABLE_BUCKETS, EMBED_DIM))
    return _text_table


def embed_texts(texts: list[str], item_ids: list[str] | None = None,
                provider: str = "tiny_fixed", endpoint=None) -> EmbeddingSet:
    """Embed prompts into the same 192-d space as the tiny image provider."""
    if provider not in PROVIDERS:
        raise ConfigurationError(f"provider={provider!r} not one of {PROVIDERS}")
    item_ids = item_ids if item_ids is not None else [str(i) for i in range(len(texts))]
    if provider == "external":
        vectors = _post_embeddings(endpoint, list(texts))
        return EmbeddingSet(vectors=vectors, provider_id="external", item_ids=item_ids)

    table = _tiny_text_table()
    vectors = np.zeros((len(texts), EMBED_DIM))
    for i, text in enumerate(texts):
        tokens = tokenize(text)
        if tokens:
            rows = [table[token_bucket(t, _TEXT_TABLE_BUCKETS)] for t in tokens]
            vectors[i] = np.mean(rows, axis=0)
    return EmbeddingSet(vectors=vectors, provider_id="tiny_fixed", item_ids=item_ids)


def _embed_images_external(paths, endpoint, batch_size: int) -> EmbeddingSet:
    vectors, ids, skipped = [], [], []
    for start in range(0, len(paths), batch_size):
        payload, chunk_ids = [], []
        for p in paths[start:start + batch_size]:
            try:
                data = p.read_bytes()
                Image.open(io.BytesIO(data)).verify()
            except Exception:
                skipped.append(p.name)
                continue
            b64 = base64.b64encode(data).decode("ascii")
            payload.append(f"data:image/png;base64,{b64}")
            chunk_ids.append(p.stem)
        if payload:
            vectors.append(_post_embeddings(endpoint, payload))
            ids.extend(chunk_ids)
    if not ids:
        raise ValidationError("no readable images for the external provider")
    return EmbeddingSet(vectors=np.concatenate(vectors), provider_id="external",
                        item_ids=ids, skipped=skipped)


def _post_embeddings(endpoint, inputs: list[str]) -> np.ndarray:
    if endpoint is None:
        raise ConfigurationError("external provider needs an endpoint")
    import requests

    url = endpoint.rstrip("/") + "/v1/embeddings"
    resp = requests.post(url, json={"model": "embedder", "input": inputs},
                         timeout=60)
    resp.raise_for_status()
    data = resp.json()["data"]
    return np.asarray([row["embedding"] for row in data], dtype=np.float64)


def make_report(real: EmbeddingSet, fake: EmbeddingSet,
                metrics: list[str],
                text_embs: EmbeddingSet | None = None,
                kid_kwargs: dict | None = None) -> MetricReport:
    fid_val = fid(real, fake) if "fid" in metrics else None
    kid_val = kid(real, fake, **(kid_kwargs or {})) if "kid" in metrics else None
    clip_val = None
    if "clip" in metrics:
        if text_embs is None:
            raise ConfigurationError("clip metric needs text embeddings")
        clip_val = clip_score(fake, text_embs)
    return MetricReport(fid=fid_val, kid=kid_val, clip_score=clip_val,
                        n_real=real.vectors.shape[0], n_fake=fake.vectors.shape[0],
                        provider_id=real.provider_id)
