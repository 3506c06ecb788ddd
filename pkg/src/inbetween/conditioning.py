"""Frozen encoders: the latent codec, the semantic encoder and the conditioning set.

The codec is a lossless space-to-depth transform followed by an orthogonal
per-cell channel mix, so ``decode_latent(encode_image(x)) == x`` up to
rounding. The semantic encoder pools both boundary frames, appends a hashed
bag-of-words embedding of the prompt and projects everything through a fixed
random matrix.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

DEFAULT_PROMPT = "generate the intermediate frame between the two input frames"

PROMPT_DIM = 32


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    patch_factor: int = 2
    mix_seed: int = 0

    @property
    def channels(self) -> int:
        return 3 * self.patch_factor**2


@dataclass
class ConditioningSet:
    """Semantic tokens plus the two boundary latents.

    ``z0`` is the spatial canvas (first frame), ``z1`` the temporal
    destination (last frame).
    """

    h: np.ndarray
    z0: np.ndarray
    z1: np.ndarray

    def __post_init__(self):
        if self.z0.shape != self.z1.shape:
            raise DimensionError(f"boundary latents differ: {self.z0.shape} vs {self.z1.shape}")


@lru_cache(maxsize=32)
def _mixing_matrix(channels: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((channels, channels)))
    # sign fix makes the factorization unique for a given seed
    q = q * np.sign(np.diag(r))
    q.setflags(write=False)
    return q


def mixing_matrix(cfg: CodecConfig) -> np.ndarray:
    return _mixing_matrix(cfg.channels, cfg.mix_seed)


def _check_image(img: np.ndarray, p: int) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected an HxWx3 image, got shape {img.shape}")
    h, w, _ = img.shape
    if h % p or w % p:
        raise DimensionError(f"image size {h}x{w} is not divisible by patch factor {p}")


def encode_image(img: np.ndarray, cfg: CodecConfig = CodecConfig()) -> np.ndarray:
    """Map an HxWx3 image to a (3p^2, H/p, W/p) latent."""
    p = cfg.patch_factor
    img = np.asarray(img, dtype=np.float64)
    _check_image(img, p)
    h, w, _ = img.shape
    cells = img.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4)
    cells = cells.reshape(h // p, w // p, cfg.channels)
    mixed = cells @ mixing_matrix(cfg).T
    return np.ascontiguousarray(mixed.transpose(2, 0, 1))


def decode_latent(z: np.ndarray, cfg: CodecConfig = CodecConfig(), clamp: bool = False) -> np.ndarray:
    p = cfg.patch_factor
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] != cfg.channels:
        raise DimensionError(f"expected a ({cfg.channels}, h, w) latent, got shape {z.shape}")
    c, hl, wl = z.shape
    cells = z.transpose(1, 2, 0) @ mixing_matrix(cfg)
    img = cells.reshape(hl, wl, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(hl * p, wl * p, 3)
    if clamp:
        img = np.clip(img, 0.0, 1.0)
    return img


def _pool(img: np.ndarray, grid: int) -> np.ndarray:
    rows = np.array_split(np.arange(img.shape[0]), grid)
    cols = np.array_split(np.arange(img.shape[1]), grid)
    out = np.empty((grid, grid, img.shape[2]))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            out[i, j] = img[r[0] : r[-1] + 1, c[0] : c[-1] + 1].mean(axis=(0, 1))
    return out


def prompt_embedding(prompt: str, dim: int = PROMPT_DIM) -> np.ndarray:
    """Signed feature hashing of lowercase whitespace tokens."""
    vec = np.zeros(dim)
    for word in prompt.lower().split():
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        code = int.from_bytes(digest, "little")
        vec[code % dim] += 1.0 if (code >> 32) & 1 else -1.0
    return vec


@lru_cache(maxsize=32)
def semantic_projection(seed: int, n_in: int, n_tokens: int, d_model: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x5E3A])
    proj = rng.standard_normal((n_tokens * d_model, n_in)) / np.sqrt(n_in)
    proj.setflags(write=False)
    return proj


def encode_semantics(
    prompt: str,
    i0: np.ndarray,
    i1: np.ndarray,
    seed: int = 0,
    n_tokens: int = 8,
    d_model: int = 64,
    grid: int = 4,
) -> np.ndarray:
    """Return ``n_tokens`` x ``d_model`` frozen semantic tokens for a frame pair.

    The frames are concatenated in order, so swapping them changes the tokens.
    """
    i0 = np.asarray(i0, dtype=np.float64)
    i1 = np.asarray(i1, dtype=np.float64)
    if i0.shape != i1.shape:
        raise DimensionError(f"frame shapes differ: {i0.shape} vs {i1.shape}")
    feats = np.concatenate(
        [_pool(i0, grid).ravel(), _pool(i1, grid).ravel(), prompt_embedding(prompt)]
    )
    proj = semantic_projection(seed, feats.size, n_tokens, d_model)
    return (proj @ feats).reshape(n_tokens, d_model)


def build_conditioning(
    i0: np.ndarray,
    i1: np.ndarray,
    prompt: str = DEFAULT_PROMPT,
    codec: CodecConfig = CodecConfig(),
    seed: int = 0,
    n_tokens: int = 8,
    d_model: int = 64,
) -> ConditioningSet:
    h = encode_semantics(prompt, i0, i1, seed=seed, n_tokens=n_tokens, d_model=d_model)
    return ConditioningSet(h=h, z0=encode_image(i0, codec), z1=encode_image(i1, codec))
