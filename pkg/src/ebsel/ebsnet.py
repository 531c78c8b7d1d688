"""The bracketing-selection agent.

Two feature branches read the auto-exposure preview: a small conv trunk
(semantic) and a 1-D conv net over a 3-level spatial-pyramid luminance
histogram (illumination).  Their features are concatenated, fused by one
fully-connected layer, and mapped to a softmax over the catalog.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .imaging import LdrImage, luminance
from .nn import ops
from .nn.params import ParamStore, add_conv, add_fc
from .nn.tensor import Tensor
from .seeding import rng_for

PYRAMID_LEVELS = 3


@dataclass(frozen=True)
class EbsConfig:
    preview_size: int = 128
    bins: int = 32
    conv_channels: tuple[int, ...] = (16, 32, 64)
    semantic_width: int = 256
    hist_channels: tuple[int, int] = (16, 16)
    illumination_width: int = 128
    fused_width: int = 128
    n_actions: int = 120
    use_semantic: bool = True
    use_illumination: bool = True

    def __post_init__(self):
        if not (self.use_semantic or self.use_illumination):
            raise ValueError("at least one EBSNet branch must be enabled")
        if self.preview_size % (2 ** len(self.conv_channels)) or self.preview_size % 4:
            raise ValueError(f"preview_size {self.preview_size} incompatible with the conv trunk")
        if self.n_actions < 1 or self.bins < 2:
            raise ValueError("n_actions >= 1 and bins >= 2 required")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "hist_channels", tuple(self.hist_channels))

    @property
    def n_patches(self) -> int:
        return sum(4**u for u in range(PYRAMID_LEVELS))

    @property
    def hist_length(self) -> int:
        return self.n_patches * self.bins

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["hist_channels"] = list(self.hist_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EbsConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# --- spatial pyramid histogram ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class HistPyramid:
    values: np.ndarray  # (n_patches * bins,), level-major then row-major patches
    bins: int
    levels: int = PYRAMID_LEVELS

    def patches(self) -> np.ndarray:
        return self.values.reshape(-1, self.bins)

    def level(self, u: int) -> np.ndarray:
        """Histograms of level ``u`` (1-based), shape (4**(u-1), bins)."""
        start = sum(4**i for i in range(u - 1))
        return self.patches()[start:start + 4 ** (u - 1)]


def luma_bins(lum: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((lum * bins).astype(np.int64), bins - 1)


def hist_pyramid(x: LdrImage | np.ndarray, bins: int = 32) -> HistPyramid:
    """Normalized luminance histograms over 1x1, 2x2 and 4x4 patch grids."""
    pix = x.pixels if isinstance(x, LdrImage) else np.asarray(x)
    h, w = pix.shape[:2]
    top = 2 ** (PYRAMID_LEVELS - 1)
    if h % top or w % top:
        raise ValueError(f"preview {h}x{w} not divisible by {top}")
    idx = luma_bins(luminance(pix), bins)
    out = []
    for u in range(PYRAMID_LEVELS):
        n = 2**u
        ph, pw = h // n, w // n
        for r in range(n):
            for c in range(n):
                patch = idx[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw]
                counts = np.bincount(patch.ravel(), minlength=bins).astype(np.float64)
                out.append(counts / counts.sum())
    return HistPyramid(np.concatenate(out), bins)


# --- network ----------------------------------------------------------------------

def init_params(cfg: EbsConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Parameters drawn per layer from named substreams, so shared layers of
    ablated variants start identical under the same seed."""
    store = ParamStore(dtype)

    def conv(name, co, ci, k):
        add_conv(store, rng_for(seed, "ebs", name), name, co, ci, k)

    def fc(name, do, di):
        add_fc(store, rng_for(seed, "ebs", name), name, do, di)

    if cfg.use_semantic:
        c_in = 3
        for i, c in enumerate(cfg.conv_channels):
            conv(f"sem.conv{i}", c, c_in, 3)
            c_in = c
        side = cfg.preview_size // 2 ** len(cfg.conv_channels)
        fc("sem.fc", cfg.semantic_width, c_in * side * side)
    if cfg.use_illumination:
        c1, c2 = cfg.hist_channels
        conv("hist.conv0", c1, cfg.n_patches, (1, 3))
        conv("hist.conv1", c2, c1, (1, 3))
        fc("hist.fc", cfg.illumination_width, c2 * cfg.bins)
    fc("fuse.fc", cfg.fused_width, cfg.semantic_width + cfg.illumination_width)
    fc("policy.fc", cfg.n_actions, cfg.fused_width)
    return store


def semantic_features(x, store: ParamStore, cfg: EbsConfig) -> Tensor:
    """x: previews (N, 3, S, S) in [0, 1] -> f_s (N, semantic_width)."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=store.dtype))
    if tuple(x.shape[1:]) != (3, cfg.preview_size, cfg.preview_size):
        raise ValueError(f"preview batch shape {x.shape} does not match config size {cfg.preview_size}")
    h = ops.add(x, -0.5)
    for i in range(len(cfg.conv_channels)):
        h = ops.conv2d(h, store[f"sem.conv{i}.w"], store[f"sem.conv{i}.b"], padding=1)
        h = ops.maxpool2d(ops.relu(h), 2)
    return ops.relu(ops.fully_connected(ops.flatten(h), store["sem.fc.w"], store["sem.fc.b"]))


def illum_features(hist, store: ParamStore, cfg: EbsConfig) -> Tensor:
    """hist: (N, n_patches * bins) -> f_h (N, illumination_width).

    Convolutions slide along the bin axis with patches as channels.
    """
    hist = hist if isinstance(hist, Tensor) else Tensor(np.asarray(hist, dtype=store.dtype))
    if hist.shape[1] != cfg.hist_length:
        raise ValueError(f"histogram length {hist.shape[1]} != {cfg.hist_length}")
    n = hist.shape[0]
    h = ops.reshape(hist, (n, cfg.n_patches, 1, cfg.bins))
    h = ops.relu(ops.conv2d(h, store["hist.conv0.w"], store["hist.conv0.b"], padding=(0, 1)))
    h = ops.relu(ops.conv2d(h, store["hist.conv1.w"], store["hist.conv1.b"], padding=(0, 1)))
    return ops.relu(ops.fully_connected(ops.flatten(h), store["hist.fc.w"], store["hist.fc.b"]))


def fuse_features(f_s, f_h, store: ParamStore, cfg: EbsConfig) -> Tensor:
    """fc([f_s, f_h]) with ReLU; concatenation order is fixed semantic-first."""
    if f_s.shape[1] != cfg.semantic_width or f_h.shape[1] != cfg.illumination_width:
        raise ValueError(f"branch widths {f_s.shape[1]}/{f_h.shape[1]} do not match config")
    f = ops.concat([f_s, f_h], axis=1)
    return ops.relu(ops.fully_connected(f, store["fuse.fc.w"], store["fuse.fc.b"]))


def policy_logits(f_x, store: ParamStore, cfg: EbsConfig) -> Tensor:
    w = store["policy.fc.w"]
    if f_x.shape[1] != w.shape[1]:
        raise ValueError(f"f_x width {f_x.shape[1]} != policy input {w.shape[1]}")
    return ops.fully_connected(f_x, w, store["policy.fc.b"])


def forward_logits(previews: np.ndarray, hists: np.ndarray, store: ParamStore, cfg: EbsConfig) -> Tensor:
    n = previews.shape[0] if previews is not None else hists.shape[0]
    if cfg.use_semantic:
        f_s = semantic_features(previews, store, cfg)
    else:
        f_s = Tensor(np.zeros((n, cfg.semantic_width), dtype=store.dtype))
    if cfg.use_illumination:
        f_h = illum_features(hists, store, cfg)
    else:
        f_h = Tensor(np.zeros((n, cfg.illumination_width), dtype=store.dtype))
    return policy_logits(fuse_features(f_s, f_h, store, cfg), store, cfg)


@dataclass(frozen=True, eq=False)
class PolicyDistribution:
    p: np.ndarray
    catalog: object = None

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if np.isnan(p).any():
            raise ValueError("policy contains NaN")
        if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("policy is not a probability vector")
        if self.catalog is not None and len(self.catalog) != p.size:
            raise ValueError(f"policy length {p.size} != catalog size {len(self.catalog)}")
        object.__setattr__(self, "p", p)

    def __len__(self):
        return self.p.size


def policy_forward(f_x, store: ParamStore, cfg: EbsConfig, catalog=None) -> list[PolicyDistribution]:
    logits = policy_logits(f_x, store, cfg)
    if catalog is not None and logits.shape[1] != len(catalog):
        raise ValueError(f"policy has {logits.shape[1]} outputs but catalog has {len(catalog)} entries")
    p = ops.softmax(logits).data
    return [PolicyDistribution(row, catalog) for row in p]


def select(p, mode: str = "argmax", rng_seed: int | None = None) -> int:
    """Pick a catalog index: argmax (lowest index wins ties) or an inverse-CDF sample."""
    probs = p.p if isinstance(p, PolicyDistribution) else np.asarray(p, dtype=np.float64)
    if np.isnan(probs).any():
        raise ValueError("cannot select from a policy containing NaN")
    if mode == "argmax":
        return int(np.argmax(probs))
    if mode == "sample":
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        return sample_index(probs, rng.random())
    raise ValueError(f"unknown selection mode {mode!r}")


def sample_index(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), probs.size - 1))


class EbsNet:
    """Config + parameters, with batch helpers over LdrImage previews."""

    def __init__(self, cfg: EbsConfig, seed: int = 0, store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else init_params(cfg, seed)

    def inputs(self, previews) -> tuple[np.ndarray, np.ndarray]:
        x = np.stack([np.transpose(p.pixels, (2, 0, 1)) for p in previews]).astype(self.store.dtype)
        h = np.stack([hist_pyramid(p, self.cfg.bins).values for p in previews]).astype(self.store.dtype)
        return x, h

    def logits(self, x: np.ndarray, h: np.ndarray) -> Tensor:
        return forward_logits(x, h, self.store, self.cfg)

    def probabilities(self, previews) -> np.ndarray:
        x, h = self.inputs(previews)
        return ops.softmax(self.logits(x, h)).data.astype(np.float64)

    def select(self, previews) -> list[int]:
        return [select(p) for p in self.probabilities(previews)]
