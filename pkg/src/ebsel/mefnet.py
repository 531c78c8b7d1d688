"""Learnable multi-exposure fusion.

A small conv net at reduced resolution predicts one logit map per input
exposure; a softmax over exposures gives convex per-pixel weights, which
are bilinearly upsampled and used to average the full-resolution inputs.
A 3x3 residual convolution refines the average and the result is clipped
to [0, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import ops
from .nn.params import ParamStore, add_conv
from .nn.tensor import Tensor
from .seeding import rng_for

CHARBONNIER_EPS = 1e-3


@dataclass(frozen=True)
class MefConfig:
    k: int = 3
    size: int = 256
    widths: tuple[int, ...] = (16, 16)
    downscale: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.downscale < 1 or self.downscale & (self.downscale - 1):
            raise ValueError(f"downscale must be a power of 2, got {self.downscale}")
        object.__setattr__(self, "widths", tuple(self.widths))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MefConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def init_params(cfg: MefConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Weight-net layers get fan-in uniform init; the refinement conv starts at
    zero so an untrained net is a pure convex blend."""
    store = ParamStore(dtype)
    c_in = 3 * cfg.k
    for i, c in enumerate(cfg.widths):
        add_conv(store, rng_for(seed, "mef", f"wnet{i}"), f"wnet{i}", c, c_in, 3)
        c_in = c
    add_conv(store, rng_for(seed, "mef", "logits"), "logits", cfg.k, c_in, 3)
    add_conv(store, rng_for(seed, "mef", "refine"), "refine", 3, 3, 3, zero=True)
    return store


def blend_weights(images, store: ParamStore, cfg: MefConfig) -> Tensor:
    """Per-pixel convex weights (N, K, H, W) for images (N, K, 3, H, W)."""
    images = np.asarray(images)
    n, k, _, h, w = images.shape
    if k != cfg.k:
        raise ValueError(f"MEFNet configured for K={cfg.k}, got {k} images")
    if h % cfg.downscale or w % cfg.downscale:
        raise ValueError(f"image size {h}x{w} not divisible by downscale {cfg.downscale}")
    x = Tensor(images.reshape(n, 3 * k, h, w).astype(store.dtype) - store.dtype.type(0.5))
    feat = ops.avgpool2d(x, cfg.downscale) if cfg.downscale > 1 else x
    for i in range(len(cfg.widths)):
        feat = ops.relu(ops.conv2d(feat, store[f"wnet{i}.w"], store[f"wnet{i}.b"], padding=1))
    logits = ops.conv2d(feat, store["logits.w"], store["logits.b"], padding=1)
    wts = ops.softmax(logits, axis=1)
    if cfg.downscale > 1:
        wts = ops.upsample_bilinear(wts, h, w)
    return wts


def mef_forward(images, store: ParamStore, cfg: MefConfig, residual: bool = True) -> Tensor:
    """Fuse images (N, K, 3, H, W) ordered longest exposure first -> (N, 3, H, W)."""
    images = np.asarray(images, dtype=store.dtype)
    if images.ndim == 4:
        images = images[None]
    n, k, c, h, w = images.shape
    if c != 3:
        raise ValueError(f"expected RGB inputs, got {c} channels")
    wts = blend_weights(images, store, cfg)
    fused = ops.sum(ops.mul(ops.reshape(wts, (n, k, 1, h, w)), images), axis=1)
    if residual:
        fused = ops.add(fused, ops.conv2d(fused, store["refine.w"], store["refine.b"], padding=1))
    return ops.clip(fused, 0.0, 1.0)


def charbonnier_loss(pred: Tensor, target: np.ndarray, eps: float = CHARBONNIER_EPS) -> Tensor:
    """Mean over the batch of the per-sample summed Charbonnier penalty."""
    d = ops.sub(pred, np.asarray(target, dtype=pred.dtype))
    per = ops.sqrt(ops.add(ops.square(d), eps * eps))
    return ops.scale(ops.sum(per), 1.0 / pred.shape[0])


def fuse_numpy(images, store: ParamStore, cfg: MefConfig, batch: int = 16) -> np.ndarray:
    """Inference helper: (N, K, 3, H, W) -> (N, 3, H, W) float32, chunked."""
    images = np.asarray(images, dtype=store.dtype)
    outs = [mef_forward(images[i:i + batch], store, cfg).data for i in range(0, images.shape[0], batch)]
    return np.concatenate(outs)


class MefNet:
    def __init__(self, cfg: MefConfig, seed: int = 0, store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else init_params(cfg, seed)

    def __call__(self, images) -> Tensor:
        return mef_forward(images, self.store, self.cfg)

    def fuse(self, images, batch: int = 16) -> np.ndarray:
        return fuse_numpy(images, self.store, self.cfg, batch)
