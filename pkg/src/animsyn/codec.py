"""Toy latent codec standing in for the VAE.

Each 8x8x3 image patch (192 values) maps to 4 latent channels through a fixed
orthonormal basis. Rows 0-2 are the per-colour-channel patch means (scaled to
unit norm) so decoded images keep a blocky likeness of the input; row 3 is a
seeded random direction orthogonalised against them. Decoding is the
transpose, so ``encode(decode(z)) == z`` and ``decode(encode(x))`` is the
orthogonal projection of ``x`` onto the codec range.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch

PATCH = 8
LATENT_CHANNELS = 4
DEFAULT_SEED = 1234


@lru_cache(maxsize=8)
def codec_basis(seed: int = DEFAULT_SEED) -> np.ndarray:
    """(4, 192) orthonormal rows over patch vectors laid out as (3, 8, 8)."""
    n = 3 * PATCH * PATCH
    basis = np.zeros((LATENT_CHANNELS, n))
    for c in range(3):
        row = np.zeros((3, PATCH, PATCH))
        row[c] = 1.0 / PATCH
        basis[c] = row.ravel()
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(n)
    r -= basis[:3].T @ (basis[:3] @ r)
    basis[3] = r / np.linalg.norm(r)
    basis.setflags(write=False)
    return basis


def _check_dims(H: int, W: int):
    if H <= 0 or W <= 0 or H % PATCH or W % PATCH:
        raise ValueError(f"image size {H}x{W} must be positive multiples of {PATCH}")


def encode_latent(image: np.ndarray, seed: int = DEFAULT_SEED) -> np.ndarray:
    """(..., 3, H, W) -> (..., 4, H/8, W/8)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 3 or image.shape[-3] != 3:
        raise ValueError(f"expected (..., 3, H, W), got {image.shape}")
    *lead, C, H, W = image.shape
    _check_dims(H, W)
    h, w = H // PATCH, W // PATCH
    patches = image.reshape(*lead, C, h, PATCH, w, PATCH)
    n = len(lead)
    patches = patches.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)  # (..., h, w, C, 8, 8)
    patches = patches.reshape(*lead, h, w, C * PATCH * PATCH)
    z = patches @ codec_basis(seed).T  # (..., h, w, 4)
    return np.ascontiguousarray(np.moveaxis(z, -1, -3))


def decode_latent(latent: np.ndarray, seed: int = DEFAULT_SEED) -> np.ndarray:
    """(..., 4, h, w) -> (..., 3, 8h, 8w)."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim < 3 or latent.shape[-3] != LATENT_CHANNELS:
        raise ValueError(f"expected (..., 4, h, w), got {latent.shape}")
    *lead, _, h, w = latent.shape
    z = np.moveaxis(latent, -3, -1)  # (..., h, w, 4)
    patches = z @ codec_basis(seed)  # (..., h, w, 192)
    patches = patches.reshape(*lead, h, w, 3, PATCH, PATCH)
    n = len(lead)
    patches = patches.transpose(*range(n), n + 2, n, n + 3, n + 1, n + 4)  # (..., 3, h, 8, w, 8)
    return np.ascontiguousarray(patches.reshape(*lead, 3, h * PATCH, w * PATCH))


# The diffusion model works on centred, rescaled latents: mid-grey maps to 0
# and a patch mean in [0, 1] maps to [-1, 1].
_MID = 0.5 * PATCH
_SCALE = 0.5 * PATCH


def to_model_latent(image: np.ndarray, seed: int = DEFAULT_SEED) -> np.ndarray:
    z = encode_latent(image, seed)
    offset = np.zeros(LATENT_CHANNELS)
    offset[:3] = _MID
    return (z - offset[:, None, None]) / _SCALE


def from_model_latent(z, seed: int = DEFAULT_SEED) -> np.ndarray:
    if isinstance(z, torch.Tensor):
        z = z.detach().cpu().double().numpy()
    offset = np.zeros(LATENT_CHANNELS)
    offset[:3] = _MID
    return decode_latent(np.asarray(z, dtype=np.float64) * _SCALE + offset[:, None, None], seed)
