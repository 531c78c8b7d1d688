"""Image containers, the gamma camera model, quality metrics, and the
bracketing action space."""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass
from math import comb
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

LUMA = np.array([0.299, 0.587, 0.114])
PSNR_CAP = 99.0
EXPOSURE_LADDER = (2.0, 1.5, 1.0, 2.0**-1, 2.0**-2, 2.0**-3, 2.0**-4, 2.0**-5, 2.0**-6, 2.0**-7)
RADIANCE_MAGIC = b"RAD1"


class ImageError(ValueError):
    """Invalid image content or incompatible image shapes."""


def luminance(pixels: np.ndarray) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64)
    return p[..., 0] * LUMA[0] + p[..., 1] * LUMA[1] + p[..., 2] * LUMA[2]


@dataclass(frozen=True, eq=False)
class RadianceMap:
    """Linear relative scene irradiance, H x W x 3, unbounded above."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ImageError(f"radiance must be HxWx3, got shape {p.shape}")
        if p.shape[0] < 8 or p.shape[1] < 8:
            raise ImageError(f"radiance must be at least 8x8, got {p.shape[:2]}")
        if not np.all(np.isfinite(p)):
            raise ImageError("radiance contains non-finite values")
        if np.any(p < 0):
            raise ImageError("radiance contains negative values")
        p = p.astype(np.float32, copy=True)
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def scaled(self, factor: float) -> "RadianceMap":
        return RadianceMap(self.pixels * np.float32(factor))


@dataclass(frozen=True)
class CameraModel:
    gamma: float = 2.2
    bit_depth: int = 8
    noise_sigma_read: float = 0.0
    noise_sigma_shot: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be finite and > 0, got {self.gamma}")
        if not (1 <= int(self.bit_depth) <= 16):
            raise ValueError(f"bit_depth must be in [1, 16], got {self.bit_depth}")
        if self.noise_sigma_read < 0 or self.noise_sigma_shot < 0:
            raise ValueError("noise sigmas must be >= 0")

    @property
    def levels(self) -> int:
        return 2 ** int(self.bit_depth) - 1

    @property
    def noisy(self) -> bool:
        return self.noise_sigma_read > 0 or self.noise_sigma_shot > 0

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "bit_depth": self.bit_depth,
            "noise_sigma_read": self.noise_sigma_read,
            "noise_sigma_shot": self.noise_sigma_shot,
        }


@dataclass(frozen=True, eq=False)
class LdrImage:
    """Display-referred image with values in [0, 1]."""

    pixels: np.ndarray
    exposure_time: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ImageError(f"LDR image must be HxWx3, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ImageError("LDR image contains non-finite values")
        if p.size and (p.min() < 0 or p.max() > 1):
            raise ImageError(f"LDR values outside [0,1]: [{p.min()}, {p.max()}]")
        if not self.exposure_time > 0:
            raise ImageError(f"exposure_time must be > 0, got {self.exposure_time}")
        p = p.astype(np.float32, copy=True)
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


def quantize(v: np.ndarray, bit_depth: int) -> np.ndarray:
    levels = 2 ** int(bit_depth) - 1
    return np.round(np.asarray(v, dtype=np.float64) * levels) / levels


def camera_response(r: np.ndarray, t: float, cam: CameraModel, rng_seed: int | None = None) -> np.ndarray:
    """Pre-quantization response clip((t*r)^(1/gamma), 0, 1) in float64."""
    exposure = float(t) * np.asarray(r, dtype=np.float64)
    if cam.noisy and rng_seed is not None:
        rng = np.random.default_rng(rng_seed)
        var = cam.noise_sigma_read**2 + cam.noise_sigma_shot**2 * exposure
        exposure = exposure + rng.standard_normal(exposure.shape) * np.sqrt(var)
    exposure = np.clip(exposure, 0.0, None)
    return np.clip(exposure ** (1.0 / cam.gamma), 0.0, 1.0)


def apply_camera(r: RadianceMap, t: float, cam: CameraModel, rng_seed: int | None = None) -> LdrImage:
    """Expose a radiance map for ``t`` seconds and quantize to the camera's bit depth.

    Noise is only drawn when the camera has nonzero sigmas and a seed is
    given, so identical arguments always give identical images.
    """
    if not t > 0:
        raise ValueError(f"exposure time must be > 0, got {t}")
    if not isinstance(r, RadianceMap):
        r = RadianceMap(np.asarray(r))
    v = camera_response(r.pixels, t, cam, rng_seed)
    return LdrImage(quantize(v, cam.bit_depth), exposure_time=float(t))


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ImageError(f"dimension mismatch: {a.shape} vs {b.shape}")


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, (LdrImage, RadianceMap)) else np.asarray(img)


def psnr(a, b) -> float:
    """PSNR in dB with peak 1; identical inputs return the 99 dB cap."""
    pa = np.asarray(_pixels(a), dtype=np.float64)
    pb = np.asarray(_pixels(b), dtype=np.float64)
    _check_same(pa, pb)
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def charbonnier(a, b, eps: float = 1e-3) -> float:
    if not eps > 0:
        raise ValueError("eps must be > 0")
    pa = np.asarray(_pixels(a), dtype=np.float64)
    pb = np.asarray(_pixels(b), dtype=np.float64)
    _check_same(pa, pb)
    return float(np.sum(np.sqrt((pa - pb) ** 2 + eps * eps)))


def downsample(img: LdrImage, h: int, w: int) -> LdrImage:
    """Area-averaged resize to (h, w); only shrinking is supported."""
    H, W = img.shape
    if h <= 0 or w <= 0:
        raise ImageError("target size must be positive")
    if h > H or w > W:
        raise ImageError(f"cannot upsample {H}x{W} to {h}x{w}")
    out = area_resize(img.pixels.astype(np.float64), h, w)
    return LdrImage(np.clip(out, 0.0, 1.0), exposure_time=img.exposure_time)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Row i averages the input interval [i*n_in/n_out, (i+1)*n_in/n_out).
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap / scale
    return m


def area_resize(pixels: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = pixels.shape[:2]
    if (h, w) == (H, W):
        return pixels.copy()
    if H % h == 0 and W % w == 0:
        fh, fw = H // h, W // w
        return pixels.reshape(h, fh, w, fw, *pixels.shape[2:]).mean(axis=(1, 3))
    mh, mw = _area_matrix(H, h), _area_matrix(W, w)
    return np.einsum("ih,hw...,jw->ij...", mh, pixels, mw)


# --- action space -----------------------------------------------------------

@dataclass(frozen=True, order=True)
class Bracketing:
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValueError("bracketing must be non-empty")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"bracketing indices must be strictly increasing: {idx}")
        if idx[0] < 0:
            raise ValueError(f"negative index in bracketing {idx}")
        object.__setattr__(self, "indices", idx)

    @property
    def k(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __str__(self):
        return ",".join(map(str, self.indices))


Predicate = Callable[[tuple[int, ...]], bool]


def accept_all(indices: tuple[int, ...]) -> bool:
    return True


def span_predicate(max_first: int, min_last: int) -> Predicate:
    """Accept brackets whose longest exposure index is <= ``max_first`` and
    whose shortest is >= ``min_last``."""

    def pred(indices):
        return indices[0] <= max_first and indices[-1] >= min_last

    pred.spec = {"kind": "span", "max_first": max_first, "min_last": min_last}
    return pred


@dataclass(frozen=True)
class BracketingCatalog:
    entries: tuple[Bracketing, ...]
    J: int
    K: int

    def __post_init__(self):
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("catalog entries must be unique")
        if list(self.entries) != sorted(self.entries):
            raise ValueError("catalog entries must be lexicographically ordered")
        for e in self.entries:
            if e.k != self.K or e.indices[-1] >= self.J:
                raise ValueError(f"entry {e.indices} incompatible with J={self.J}, K={self.K}")
        if len(self.entries) > comb(self.J, self.K):
            raise ValueError("catalog larger than C(J, K)")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i: int) -> Bracketing:
        return self.entries[i]

    def index(self, indices: Iterable[int]) -> int:
        return self.entries.index(Bracketing(tuple(indices)))

    def to_json(self) -> str:
        return json.dumps([list(e.indices) for e in self.entries])

    @classmethod
    def from_json(cls, text: str, J: int) -> "BracketingCatalog":
        rows = json.loads(text)
        if not rows:
            raise ValueError("empty catalog")
        entries = tuple(Bracketing(tuple(r)) for r in rows)
        return cls(entries, J, entries[0].k)


def build_catalog(J: int, K: int, prune: Predicate | None = None) -> BracketingCatalog:
    if not 1 <= K <= J:
        raise ValueError(f"need 1 <= K <= J, got J={J}, K={K}")
    prune = prune or accept_all
    entries = tuple(Bracketing(c) for c in itertools.combinations(range(J), K) if prune(c))
    if not entries:
        raise ValueError(f"prune predicate rejected every {K}-subset of {J} exposures")
    return BracketingCatalog(entries, J, K)


# --- persistence ------------------------------------------------------------

def save_png(img: LdrImage, path: str | Path) -> None:
    arr = np.round(np.asarray(img.pixels, dtype=np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", compress_level=6)


def load_png(path: str | Path, exposure_time: float = 1.0) -> LdrImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return LdrImage(arr, exposure_time=exposure_time)


def save_radiance(r: RadianceMap, path: str | Path) -> None:
    """Write ``RAD1`` + uint32 height/width/channels (LE) + float32 LE pixels."""
    h, w, c = r.pixels.shape
    with open(path, "wb") as f:
        f.write(RADIANCE_MAGIC + struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(r.pixels, dtype="<f4").tobytes())


def load_radiance(path: str | Path) -> RadianceMap:
    raw = Path(path).read_bytes()
    if raw[:4] != RADIANCE_MAGIC or len(raw) < 16:
        raise ImageError(f"{path}: not a radiance file")
    h, w, c = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != h * w * c:
        raise ImageError(f"{path}: truncated radiance payload")
    return RadianceMap(data.reshape(h, w, c))


def stack_array(images: Sequence[LdrImage]) -> np.ndarray:
    """K images -> float32 array (K, 3, H, W)."""
    return np.stack([np.transpose(im.pixels, (2, 0, 1)) for im in images]).astype(np.float32)


def chw(img: LdrImage) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(img.pixels, (2, 0, 1)))


def from_chw(arr: np.ndarray, exposure_time: float = 1.0) -> LdrImage:
    return LdrImage(np.transpose(np.clip(arr, 0.0, 1.0), (1, 2, 0)), exposure_time=exposure_time)
