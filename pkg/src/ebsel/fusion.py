"""Classical exposure fusion: per-pixel quality weights blended across
Laplacian pyramids.  Used to build ground truth and as the non-learned
fuser in evaluation."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from .imaging import LdrImage, ImageError, luminance

WEIGHT_FLOOR = 1e-12
WELL_EXPOSED_SIGMA = 0.2
_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def contrast(pixels: np.ndarray) -> np.ndarray:
    return np.abs(ndimage.laplace(luminance(pixels), mode="reflect"))


def saturation(pixels: np.ndarray) -> np.ndarray:
    return np.std(np.asarray(pixels, dtype=np.float64), axis=2)


def well_exposedness(pixels: np.ndarray, sigma: float = WELL_EXPOSED_SIGMA) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64)
    return np.prod(np.exp(-((p - 0.5) ** 2) / (2 * sigma**2)), axis=2)


def quality_weights(img: LdrImage, exponents: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """contrast^wc * saturation^ws * well_exposedness^we, plus a tiny floor."""
    wc, ws, we = exponents
    if min(exponents) < 0:
        raise ValueError(f"exponents must be >= 0, got {exponents}")
    p = img.pixels if isinstance(img, LdrImage) else np.asarray(img)
    w = np.power(contrast(p), wc) * np.power(saturation(p), ws) * np.power(well_exposedness(p), we)
    return w + WEIGHT_FLOOR


def normalized_weights(stack: Sequence[LdrImage], exponents=(1.0, 1.0, 1.0)) -> np.ndarray:
    w = np.stack([quality_weights(im, exponents) for im in stack])
    return w / w.sum(axis=0, keepdims=True)


def _blur(a: np.ndarray) -> np.ndarray:
    a = ndimage.convolve1d(a, _KERNEL, axis=0, mode="reflect")
    return ndimage.convolve1d(a, _KERNEL, axis=1, mode="reflect")


def _reduce(a: np.ndarray) -> np.ndarray:
    return _blur(a)[::2, ::2]


def _expand(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    up = np.zeros(shape + a.shape[2:])
    up[::2, ::2] = a
    return 4.0 * _blur(up)


def gaussian_pyramid(a: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [np.asarray(a, dtype=np.float64)]
    for _ in range(levels - 1):
        pyr.append(_reduce(pyr[-1]))
    return pyr


def laplacian_pyramid(a: np.ndarray, levels: int) -> list[np.ndarray]:
    g = gaussian_pyramid(a, levels)
    lap = [g[i] - _expand(g[i + 1], g[i].shape[:2]) for i in range(levels - 1)]
    lap.append(g[-1])
    return lap


def collapse(pyr: list[np.ndarray]) -> np.ndarray:
    out = pyr[-1]
    for lev in reversed(pyr[:-1]):
        out = lev + _expand(out, lev.shape[:2])
    return out


def max_levels(h: int, w: int) -> int:
    return int(np.floor(np.log2(min(h, w))))


def default_levels(h: int, w: int) -> int:
    return max(1, max_levels(h, w) - 2)


def exposure_fuse(stack: Sequence[LdrImage], levels: int | None = None,
                  exponents=(1.0, 1.0, 1.0)) -> LdrImage:
    """Fuse differently exposed images into one display-ready image.

    Each input's Laplacian pyramid is blended with the Gaussian pyramid of
    its normalized quality weights; the blended pyramid is collapsed and
    clipped to [0, 1].
    """
    if len(stack) == 0:
        raise ImageError("exposure_fuse needs at least one image")
    h, w = stack[0].shape
    for im in stack[1:]:
        if im.shape != (h, w):
            raise ImageError(f"size mismatch in stack: {im.shape} vs {(h, w)}")
    if levels is None:
        levels = default_levels(h, w)
    if not 1 <= levels <= max_levels(h, w):
        raise ValueError(f"levels must be in [1, {max_levels(h, w)}], got {levels}")

    weights = normalized_weights(stack, exponents)
    blended = None
    for im, wmap in zip(stack, weights):
        lp = laplacian_pyramid(im.pixels.astype(np.float64), levels)
        gw = gaussian_pyramid(wmap, levels)
        contrib = [l * g[..., None] for l, g in zip(lp, gw)]
        blended = contrib if blended is None else [b + c for b, c in zip(blended, contrib)]
    out = np.clip(collapse(blended), 0.0, 1.0)
    return LdrImage(out, exposure_time=stack[0].exposure_time)


def make_gt(scene, levels: int | None = None) -> LdrImage:
    """Reference image: classical fusion of the scene's full exposure stack."""
    if len(scene.stack) == 0:
        raise ImageError("scene has no exposure stack")
    return exposure_fuse(scene.stack, levels)
