"""Counting oracle for the spatial pyramid histogram."""

import numpy as np


def count_histograms(pixels: np.ndarray, bins: int = 32, levels: int = 3) -> np.ndarray:
    h, w = pixels.shape[:2]
    lum = 0.299 * pixels[..., 0].astype(np.float64) + 0.587 * pixels[..., 1] + 0.114 * pixels[..., 2]
    out = []
    for u in range(levels):
        n = 2**u
        ph, pw = h // n, w // n
        for r in range(n):
            for c in range(n):
                counts = [0] * bins
                for v in lum[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw].ravel():
                    counts[min(int(v * bins), bins - 1)] += 1
                total = ph * pw
                out.extend(k / total for k in counts)
    return np.array(out)


def random_preview(rng, size):
    """8-bit quantized preview with a mix of flat, clipped and noisy regions."""
    p = rng.random((size, size, 3))
    p[: size // 4] = 1.0
    p[-size // 4:, : size // 2] = 0.0
    return np.round(p * 255) / 255
