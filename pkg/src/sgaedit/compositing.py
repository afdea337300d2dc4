"""Output assembly: masked compositing, pyramid blending, token decoding.

Quantization round-trips are lossy, so generated pixels are kept only
inside the mask while everything else comes from the original image,
followed by Laplacian-pyramid blending to soften the seam.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IncompleteGridError, ShapeError
from .images import with_channels
from .quantizer import Codebook, TokenGrid

# Separable binomial smoothing kernel (Burt-Adelson).
_KERNEL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable 5-tap blur with edge replication (constants stay constant)."""
    x = with_channels(img)
    padded = np.pad(x, ((2, 2), (0, 0), (0, 0)), mode="edge")
    x = sum(_KERNEL5[i] * padded[i : i + img.shape[0]] for i in range(5))
    padded = np.pad(x, ((0, 0), (2, 2), (0, 0)), mode="edge")
    x = sum(_KERNEL5[i] * padded[:, i : i + img.shape[1]] for i in range(5))
    return x[:, :, 0] if np.asarray(img).ndim == 2 else x


def _down(img: np.ndarray) -> np.ndarray:
    return _blur(img)[::2, ::2]


def _up(img: np.ndarray) -> np.ndarray:
    x = np.asarray(img)
    return _blur(np.repeat(np.repeat(x, 2, axis=0), 2, axis=1))


@dataclass
class Pyramid:
    """Band-pass levels (finest first) plus the lowest-resolution residual."""

    bands: list
    residual: np.ndarray


def build_pyramid(img: np.ndarray, levels: int) -> Pyramid:
    """Laplacian decomposition with `levels` levels (1 = just the image)."""
    img = np.asarray(img, dtype=np.float64)
    if levels < 1:
        raise ShapeError("levels must be >= 1")
    h, w = img.shape[:2]
    if h % (2**levels) or w % (2**levels):
        raise ShapeError(f"dims {h}x{w} not divisible by 2^{levels}")
    bands = []
    current = img
    for _ in range(levels - 1):
        smaller = _down(current)
        bands.append(current - _up(smaller))
        current = smaller
    return Pyramid(bands=bands, residual=current)


def collapse(pyr: Pyramid) -> np.ndarray:
    out = pyr.residual
    for band in reversed(pyr.bands):
        out = _up(out) + band
    return out


def composite(original: np.ndarray, generated: np.ndarray, mask_pixels: np.ndarray) -> np.ndarray:
    """Generated pixels inside the mask, original pixels (bit-exact) outside."""
    orig = np.asarray(original, dtype=np.float64)
    gen = np.asarray(generated, dtype=np.float64)
    mask = np.asarray(mask_pixels, dtype=bool)
    if orig.shape != gen.shape:
        raise ShapeError(f"image dims differ: {orig.shape} vs {gen.shape}")
    if mask.shape != orig.shape[:2]:
        raise ShapeError(f"mask dims {mask.shape} != image dims {orig.shape[:2]}")
    sel = mask if orig.ndim == 2 else mask[:, :, None]
    return np.where(sel, gen, orig)


def laplacian_blend(a: np.ndarray, b: np.ndarray, mask: np.ndarray, levels: int = 4) -> np.ndarray:
    """Blend a over b through Laplacian pyramids with a blurred soft mask.

    With levels=1 this reduces to a direct alpha blend under the blurred
    mask. Output is clamped to [0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image dims differ: {a.shape} vs {b.shape}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape[:2]:
        raise ShapeError(f"mask dims {mask.shape} != image dims {a.shape[:2]}")

    pyr_a = build_pyramid(a, levels)
    pyr_b = build_pyramid(b, levels)
    weights = [_blur(mask)]
    for _ in range(levels - 1):
        weights.append(_down(weights[-1]))

    def mix(level_a, level_b, w):
        w = w if level_a.ndim == 2 else w[:, :, None]
        return w * level_a + (1.0 - w) * level_b

    blended = Pyramid(
        bands=[mix(la, lb, w) for la, lb, w in zip(pyr_a.bands, pyr_b.bands, weights)],
        residual=mix(pyr_a.residual, pyr_b.residual, weights[-1]),
    )
    return np.clip(collapse(blended), 0.0, 1.0)


def tokens_to_image(tokens: TokenGrid, codebook: Codebook, projection: np.ndarray, patch: int) -> np.ndarray:
    """Nearest-codebook patch reconstruction via the projection pseudo-inverse.

    Each token's codebook vector is mapped back to pixel space with the
    minimum-norm least-squares inverse of the patch projection.
    """
    if tokens.masked_positions().any():
        raise IncompleteGridError("grid still contains MASK tokens")
    projection = np.asarray(projection, dtype=np.float64)
    n_in = projection.shape[0]
    channels = n_in // (patch * patch)
    if patch * patch * channels != n_in:
        raise ShapeError(f"projection rows {n_in} not a multiple of patch^2")
    inverse = np.linalg.pinv(projection)  # d x (patch*patch*channels)
    vectors = codebook.entries[tokens.flat()]  # (h*w) x d
    patches = (vectors @ inverse).reshape(tokens.h, tokens.w, patch, patch, channels)
    img = patches.transpose(0, 2, 1, 3, 4).reshape(tokens.h * patch, tokens.w * patch, channels)
    img = np.clip(img, 0.0, 1.0)
    return img[:, :, 0] if channels == 1 else img
