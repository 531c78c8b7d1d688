"""Procedural wide-dynamic-range scenes and the on-disk dataset format.

A scene is a smooth, blocky background lit at roughly unit radiance, a few
deep shadows several stops below it, and one or more emitters far above
it.  Emitters come in two kinds whose shape predicts their brightness:
rectangular billboards (moderately bright, glyph texture) and round lamps
(very bright, ring texture).  Both saturate the auto-exposure preview, so
their shape is the only cue to how short the bracket must reach.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import fusion
from .imaging import (
    EXPOSURE_LADDER,
    CameraModel,
    ImageError,
    LdrImage,
    RadianceMap,
    apply_camera,
    downsample,
    load_png,
    load_radiance,
    luminance,
    quantize,
    save_png,
    save_radiance,
)
from .seeding import derive_seed

log = logging.getLogger(__name__)

J = len(EXPOSURE_LADDER)
AE_TARGET = 0.45
AE_TOLERANCE = 0.01
EMITTER_RATIO = 16.0
MANIFEST_VERSION = 1


class DatasetError(RuntimeError):
    """Corrupt or inconsistent dataset directory."""


@dataclass(frozen=True)
class SceneLayout:
    n_emitters: tuple[int, int] = (1, 2)
    lamp_probability: float = 0.5
    billboard_stops: tuple[float, float] = (5.5, 6.0)
    lamp_stops: tuple[float, float] = (7.75, 8.25)
    billboard_area: tuple[float, float] = (0.08, 0.14)
    lamp_area: tuple[float, float] = (0.02, 0.04)
    n_shadows: tuple[int, int] = (1, 2)
    shadow_stops: tuple[float, float] = (-12.0, -10.0)
    n_blocks: tuple[int, int] = (4, 9)
    gradient_stops: float = 1.5


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = 256
    width: int = 256
    layout: SceneLayout = field(default_factory=SceneLayout)
    dynamic_range_target: float = 1000.0

    def validate(self) -> None:
        lay = self.layout
        if self.dynamic_range_target <= 10:
            raise ValueError("dynamic_range_target must exceed 10")
        if self.height < 32 or self.width < 32:
            raise ValueError("scene must be at least 32x32")
        if lay.n_emitters[0] < 0 or lay.n_emitters[0] > lay.n_emitters[1]:
            raise ValueError(f"bad emitter count range {lay.n_emitters}")
        for area in (lay.billboard_area, lay.lamp_area):
            if not 0 < area[0] <= area[1] <= 0.25:
                raise ValueError(f"bad emitter area range {area}")
        if lay.n_shadows[0] < 0 or lay.n_shadows[0] > lay.n_shadows[1]:
            raise ValueError(f"bad shadow count range {lay.n_shadows}")
        # Weakest guaranteed bright level over strongest guaranteed dark level.
        bright = 2.0 ** -lay.gradient_stops * 0.25
        if lay.n_emitters[0] >= 1:
            low = lay.billboard_stops[0] if lay.lamp_probability < 1 else lay.lamp_stops[0]
            bright = max(bright, 2.0**low * _GLYPH_OFF)
        dark = 2.0 ** -lay.gradient_stops * 0.25
        if lay.n_shadows[0] >= 1:
            dark = min(dark, 2.0 ** lay.shadow_stops[1] * _SHADOW_TEXTURE[1])
        if bright / dark < self.dynamic_range_target:
            raise ValueError(
                f"dynamic range target {self.dynamic_range_target:g} unreachable: "
                f"layout guarantees only {bright / dark:.1f}"
            )


_GLYPH_OFF = 0.3
_SHADOW_TEXTURE = (0.5, 2.0)


def _tint(rng, spread):
    c = 1.0 + rng.uniform(-spread, spread, 3)
    return c / c.mean()


def _background(rng, h, w, lay: SceneLayout) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)
    level = 2.0 ** (2 * lay.gradient_stops * ramp * rng.uniform(0.3, 1.0))
    refl = np.full((h, w, 3), 0.6) * _tint(rng, 0.2)
    for _ in range(rng.integers(lay.n_blocks[0], lay.n_blocks[1] + 1)):
        bh, bw = rng.integers(h // 8, h // 2), rng.integers(w // 8, w // 2)
        y0, x0 = rng.integers(0, h - bh), rng.integers(0, w - bw)
        refl[y0:y0 + bh, x0:x0 + bw] = rng.uniform(0.25, 1.5) * _tint(rng, 0.4)
    grain = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.5)
    grain = 1.0 + 0.6 * grain / (np.abs(grain).max() + 1e-12)
    return level[..., None] * refl * grain[..., None]


def _shadow_mask(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    ry, rx = rng.uniform(0.12, 0.25) * h, rng.uniform(0.12, 0.25) * w
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _glyphs(rng, bh, bw) -> np.ndarray:
    # Rows of blocky characters: bright strokes on a dimmer panel.
    tex = np.full((bh, bw), _GLYPH_OFF)
    cell = max(3, min(bh, bw) // 6)
    for y in range(1, bh - cell, cell + 1):
        for x in range(1, bw - cell, cell):
            bits = rng.random((3, 3)) < 0.5
            glyph = np.kron(bits, np.ones((cell // 3 + 1, cell // 3 + 1)))[:cell, :cell]
            tex[y:y + cell, x:x + cell] = np.where(glyph, 1.0, _GLYPH_OFF)
    return tex


def _place_billboard(rng, rad, intensity, area):
    h, w = rad.shape[:2]
    aspect = rng.uniform(1.2, 2.2)
    bh = int(round(np.sqrt(area * h * w / aspect)))
    bw = min(int(round(aspect * bh)), w - 2)
    y0, x0 = rng.integers(0, h - bh), rng.integers(0, w - bw)
    tex = _glyphs(rng, bh, bw)
    rad[y0:y0 + bh, x0:x0 + bw] = intensity * tex[..., None] * _tint(rng, 0.5)


def _place_lamp(rng, rad, intensity, area):
    h, w = rad.shape[:2]
    r = np.sqrt(area * h * w / np.pi)
    cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.hypot(yy - cy, xx - cx)
    period = rng.uniform(2.5, 5.0)
    rings = _GLYPH_OFF + (1 - _GLYPH_OFF) * 0.5 * (1 + np.cos(2 * np.pi * d / period))
    inside = d <= r
    rad[inside] = intensity * rings[inside, None] * _tint(rng, 0.3)


def gen_radiance(spec: SceneSpec) -> RadianceMap:
    """Deterministic radiance map for ``spec.seed``."""
    spec.validate()
    lay = spec.layout
    rng = np.random.default_rng(derive_seed(spec.seed, "radiance"))
    h, w = spec.height, spec.width
    rad = _background(rng, h, w, lay)
    base = float(np.median(luminance(rad)))

    for _ in range(rng.integers(lay.n_shadows[0], lay.n_shadows[1] + 1)):
        mask = _shadow_mask(rng, h, w)
        level = base * 2.0 ** rng.uniform(*lay.shadow_stops)
        stripes = ndimage.gaussian_filter(rng.random((h, w)), 2.0)
        stripes = (stripes - stripes.min()) / (np.ptp(stripes) + 1e-12)
        tex = _SHADOW_TEXTURE[0] + (_SHADOW_TEXTURE[1] - _SHADOW_TEXTURE[0]) * stripes
        rad[mask] = (level * tex[..., None] * _tint(rng, 0.2))[mask]

    n_emit = rng.integers(lay.n_emitters[0], lay.n_emitters[1] + 1)
    lamp = rng.random() < lay.lamp_probability
    stops = rng.uniform(*(lay.lamp_stops if lamp else lay.billboard_stops))
    for _ in range(n_emit):
        intensity = base * 2.0 ** (stops + rng.uniform(-0.25, 0.25))
        area = rng.uniform(*(lay.lamp_area if lamp else lay.billboard_area))
        (_place_lamp if lamp else _place_billboard)(rng, rad, intensity, area)

    rad = np.maximum(rad, base * 1e-6)
    rmap = RadianceMap(rad)
    lum = luminance(rmap.pixels)
    ratio = lum.max() / lum.min()
    if n_emit and lay.n_shadows[0] and ratio < spec.dynamic_range_target:
        raise ValueError(f"seed {spec.seed}: dynamic range {ratio:.1f} below target")
    return rmap


def dynamic_range(r: RadianceMap) -> float:
    lum = luminance(r.pixels)
    return float(lum.max() / max(lum.min(), 1e-30))


def mean_luma(img: LdrImage) -> float:
    return float(luminance(img.pixels).mean())


def solve_auto_exposure(r: RadianceMap, cam: CameraModel, target: float = AE_TARGET,
                        tol: float = AE_TOLERANCE, max_iter: int = 64) -> float:
    """Bisect (in log time) for the exposure whose mean luma is ``target``."""
    if not np.any(r.pixels > 0):
        raise ValueError("cannot auto-expose an all-zero radiance map")

    def measure(t):
        return mean_luma(apply_camera(r, t, cam))

    # Bracket the root: for gamma response, luma grows monotonically with t.
    lum = luminance(r.pixels)
    lo = hi = 1.0 / float(np.mean(lum))
    for _ in range(max_iter):
        if measure(lo) <= target:
            break
        lo /= 4
    for _ in range(max_iter):
        if measure(hi) >= target:
            break
        hi *= 4
    m_lo, m_hi = measure(lo), measure(hi)
    if not (m_lo <= target <= m_hi):
        raise RuntimeError(f"auto exposure could not bracket target {target}")

    for _ in range(max_iter):
        mid = float(np.sqrt(lo * hi))
        m = measure(mid)
        if m < target:
            lo = mid
        else:
            hi = mid
        if hi / lo - 1 < 1e-9:
            break
    t = float(np.sqrt(lo * hi))
    achieved = measure(t)
    if abs(achieved - target) > tol:
        raise RuntimeError(f"auto exposure did not converge: mean luma {achieved:.4f}")
    return t


@dataclass(frozen=True, eq=False)
class Scene:
    id: str
    preview: LdrImage
    stack: tuple[LdrImage, ...]
    gt: LdrImage
    t_a: float
    radiance: RadianceMap | None = None

    def __post_init__(self):
        if len(self.stack) != J:
            raise ImageError(f"scene {self.id}: stack has {len(self.stack)} images, need {J}")
        shape = self.stack[0].shape
        if any(im.shape != shape for im in self.stack) or self.gt.shape != shape:
            raise ImageError(f"scene {self.id}: stack/gt sizes differ")
        times = [im.exposure_time for im in self.stack]
        if not (times[0] > times[1] > times[2] and all(a > b for a, b in zip(times[2:], times[3:]))):
            raise ImageError(f"scene {self.id}: exposure times not decreasing")

    @property
    def shape(self):
        return self.stack[0].shape


def render_stack(r: RadianceMap, cam: CameraModel, t_a: float) -> tuple[LdrImage, ...]:
    return tuple(apply_camera(r, f * t_a, cam) for f in EXPOSURE_LADDER)


def build_scene(r: RadianceMap, cam: CameraModel, id: str, preview_size: int = 128,
                levels: int | None = None) -> Scene:
    t_a = solve_auto_exposure(r, cam)
    stack = render_stack(r, cam, t_a)
    ae = stack[2]
    small = downsample(ae, preview_size, preview_size)
    preview = LdrImage(quantize(small.pixels, cam.bit_depth), exposure_time=t_a)
    gt = fusion.exposure_fuse(stack, levels)
    gt = LdrImage(quantize(gt.pixels, 8), exposure_time=t_a)
    return Scene(id=id, preview=preview, stack=stack, gt=gt, t_a=t_a, radiance=r)


def scene_id(index: int) -> str:
    return f"scene_{index:04d}"


def generate_scenes(count: int, seed: int, cam: CameraModel | None = None, size: int = 256,
                    preview_size: int = 128, layout: SceneLayout | None = None) -> list[Scene]:
    cam = cam or CameraModel()
    layout = layout or SceneLayout()
    scenes = []
    for i in range(count):
        spec = SceneSpec(seed=derive_seed(seed, "scene", i), height=size, width=size, layout=layout)
        scenes.append(build_scene(gen_radiance(spec), cam, scene_id(i), preview_size))
    return scenes


def split_counts(n: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    return n_train, n_val, n - n_train - n_val


def assign_splits(ids: Sequence[str], seed: int, ratios=(0.6, 0.2, 0.2)) -> dict[str, str]:
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(len(ids))
    n_train, n_val, _ = split_counts(len(ids), ratios)
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return {i: out[i] for i in ids}


# --- persistence --------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(scenes: Sequence[Scene], out_dir, seed: int = 0, cam: CameraModel | None = None,
                  ratios=(0.6, 0.2, 0.2), extra: dict | None = None) -> dict:
    """Write scenes and ``manifest.json`` under ``out_dir``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = assign_splits([s.id for s in scenes], seed, ratios)
    entries = []
    for s in scenes:
        d = out / s.id
        if d.exists():
            shutil.rmtree(d)
        d.mkdir()
        save_png(s.preview, d / "preview.png")
        for j, im in enumerate(s.stack):
            save_png(im, d / f"z{j}.png")
        save_png(s.gt, d / "gt.png")
        if s.radiance is not None:
            save_radiance(s.radiance, d / "radiance.f32")
        files = {p.name: _sha256(p) for p in sorted(d.iterdir())}
        entries.append({
            "id": s.id,
            "split": splits[s.id],
            "t_a": s.t_a,
            "exposure_times": [im.exposure_time for im in s.stack],
            "files": files,
        })
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "camera": (cam or CameraModel()).to_dict(),
        "split_ratios": list(ratios),
        "scenes": entries,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest {path}: {e}") from e
    if manifest.get("version") != MANIFEST_VERSION or "scenes" not in manifest:
        raise DatasetError(f"unrecognized manifest version in {path}")
    ids = [e["id"] for e in manifest["scenes"]]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate scene ids in manifest")
    return manifest


def _load_scene(d: Path, entry: dict, verify: bool) -> Scene:
    for name, digest in entry["files"].items():
        p = d / name
        if not p.exists():
            raise DatasetError(f"missing file {p}")
        if verify and _sha256(p) != digest:
            raise DatasetError(f"hash mismatch for {p}")
    times = entry["exposure_times"]
    t_a = entry["t_a"]
    stack = tuple(load_png(d / f"z{j}.png", times[j]) for j in range(len(times)))
    radiance = load_radiance(d / "radiance.f32") if "radiance.f32" in entry["files"] else None
    return Scene(
        id=entry["id"],
        preview=load_png(d / "preview.png", t_a),
        stack=stack,
        gt=load_png(d / "gt.png", t_a),
        t_a=t_a,
        radiance=radiance,
    )


def read_dataset(data_dir, splits: Iterable[str] | None = None, verify: bool = True) -> tuple[dict, list[Scene]]:
    """Load (manifest, scenes), optionally filtered to the named splits."""
    root = Path(data_dir)
    manifest = read_manifest(root)
    want = set(splits) if splits is not None else None
    scenes = [
        _load_scene(root / e["id"], e, verify)
        for e in manifest["scenes"]
        if want is None or e["split"] in want
    ]
    return manifest, scenes


def split_scenes(manifest: dict, scenes: Sequence[Scene]) -> dict[str, list[Scene]]:
    by_id = {e["id"]: e["split"] for e in manifest["scenes"]}
    out = {"train": [], "val": [], "test": []}
    for s in scenes:
        out[by_id[s.id]].append(s)
    return out


def load_scene_dir(scene_dir, verify: bool = True) -> Scene:
    """Load one scene directory.  Exposure times and hashes come from the
    parent manifest when there is one; otherwise the ladder is taken relative
    to t_a = 1."""
    d = Path(scene_dir)
    manifest_path = d.parent / "manifest.json"
    if manifest_path.exists():
        for entry in read_manifest(d.parent)["scenes"]:
            if entry["id"] == d.name:
                return _load_scene(d, entry, verify)
    if not (d / "preview.png").exists():
        raise DatasetError(f"{d} is not a scene directory (no preview.png)")
    stack = tuple(load_png(d / f"z{j}.png", f) for j, f in enumerate(EXPOSURE_LADDER))
    gt = load_png(d / "gt.png") if (d / "gt.png").exists() else stack[2]
    return Scene(id=d.name, preview=load_png(d / "preview.png"), stack=stack, gt=gt, t_a=1.0)
