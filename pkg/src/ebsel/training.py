"""Reward, policy-gradient update, brute-force oracle, and the three
training stages (fusion pretraining, supervised selection pretraining,
alternating joint training)."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ebsnet, fusion, mefnet
from .ebsnet import EbsConfig, hist_pyramid
from .imaging import BracketingCatalog, from_chw, psnr
from .mefnet import MefConfig
from .nn import ops
from .nn.params import ParamStore, adam_step
from .nn.tensor import GraphError, Tensor
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged or was given inconsistent inputs."""


@dataclass(frozen=True)
class TrainConfig:
    lr_mef: float = 1e-3
    lr_ebs: float = 1e-4
    joint_lr_scale: float = 0.1
    batch_size: int = 8
    alternation_period: int = 10
    reward_clip: float = 5.0
    stage1_epochs: int = 60
    stage2_epochs: int = 150
    stage3_epochs: int = 20
    crop: int | None = 128
    augment: bool = True
    val_brackets: int = 4

    @classmethod
    def from_run(cls, rc) -> "TrainConfig":
        return cls(**rc["train"])


# --- scene tensors --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SceneData:
    """Array view of a Scene: stack (J, 3, H, W), gt (3, H, W), preview (3, S, S)."""

    id: str
    stack: np.ndarray
    gt: np.ndarray
    preview: np.ndarray
    hist: np.ndarray


def prepare(scenes, bins: int = 32) -> list[SceneData]:
    out = []
    for s in scenes:
        out.append(SceneData(
            id=s.id,
            stack=np.stack([np.transpose(im.pixels, (2, 0, 1)) for im in s.stack]).astype(np.float32),
            gt=np.ascontiguousarray(np.transpose(s.gt.pixels, (2, 0, 1)), dtype=np.float32),
            preview=np.ascontiguousarray(np.transpose(s.preview.pixels, (2, 0, 1)), dtype=np.float32),
            hist=hist_pyramid(s.preview, bins).values.astype(np.float32),
        ))
    return out


def dihedral(a: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 square symmetries (rot90 by code % 4, then a flip if code >= 4)
    applied to the last two axes."""
    out = np.rot90(a, code % 4, axes=(-2, -1))
    if code >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment_arrays(stack: np.ndarray, gt: np.ndarray, preview: np.ndarray | None,
                   rng: np.random.Generator, crop: int | None = None, geometric: bool = True):
    """Random crop + rotation/flip applied identically to stack, gt and preview.

    The preview crop is the same window scaled to preview resolution.
    """
    h, w = gt.shape[-2:]
    if crop is not None and crop < min(h, w):
        y0 = int(rng.integers(0, h - crop + 1))
        x0 = int(rng.integers(0, w - crop + 1))
        stack = stack[..., y0:y0 + crop, x0:x0 + crop]
        gt = gt[..., y0:y0 + crop, x0:x0 + crop]
        if preview is not None:
            s = preview.shape[-1] / w
            py, px, pc = int(round(y0 * s)), int(round(x0 * s)), int(round(crop * s))
            preview = preview[..., py:py + pc, px:px + pc]
    code = int(rng.integers(0, 8)) if geometric else 0
    stack, gt = dihedral(stack, code), dihedral(gt, code)
    if preview is not None:
        preview = dihedral(preview, code)
    return stack, gt, preview


# --- fusers ---------------------------------------------------------------------

class ClassicalFuser:
    name = "classical"

    def __init__(self, levels: int | None = None):
        self.levels = levels

    def fuse(self, data: SceneData, brackets: Sequence[Sequence[int]]) -> np.ndarray:
        out = []
        for b in brackets:
            imgs = [from_chw(data.stack[j]) for j in b]
            out.append(np.transpose(fusion.exposure_fuse(imgs, self.levels).pixels, (2, 0, 1)))
        return np.stack(out).astype(np.float32)


class LearnedFuser:
    name = "learned"

    def __init__(self, store: ParamStore, cfg: MefConfig, batch: int = 8):
        self.store = store
        self.cfg = cfg
        self.batch = batch

    def fuse(self, data: SceneData, brackets: Sequence[Sequence[int]]) -> np.ndarray:
        imgs = np.stack([data.stack[list(b)] for b in brackets])
        return mefnet.fuse_numpy(imgs, self.store, self.cfg, self.batch)


def bracket_psnrs(data: SceneData, fuser, brackets) -> np.ndarray:
    fused = fuser.fuse(data, brackets)
    return np.array([psnr(f, data.gt) for f in fused])


# --- reward & oracle ------------------------------------------------------------

def reward(prev_psnr: float, cur_psnr: float, clip: float = 5.0) -> float:
    """PSNR improvement over the previous step, clamped to [-clip, clip]."""
    return float(np.clip(cur_psnr - prev_psnr, -clip, clip))


@dataclass
class RewardState:
    """Last achieved PSNR per scene id (the previous-step term of the reward)."""

    last: dict[str, float] = field(default_factory=dict)
    init_policy: str = "stage2-argmax"

    def prev(self, scene_id: str) -> float:
        if scene_id not in self.last:
            raise TrainingError(f"reward state has no entry for scene {scene_id}")
        return self.last[scene_id]

    def update(self, scene_id: str, value: float) -> None:
        self.last[scene_id] = float(value)


@dataclass
class OracleTable:
    """PSNR of every catalog entry on every scene, under one fuser."""

    ids: list[str]
    psnr: np.ndarray  # (n_scenes, n_catalog)
    entries: list[tuple[int, ...]]
    fuser: str = "learned"

    @property
    def argmax(self) -> np.ndarray:
        return np.argmax(self.psnr, axis=1)

    @property
    def best(self) -> np.ndarray:
        return self.psnr.max(axis=1)

    def row(self, scene_id: str) -> np.ndarray:
        return self.psnr[self.ids.index(scene_id)]

    def subset(self, ids: Sequence[str]) -> "OracleTable":
        rows = [self.ids.index(i) for i in ids]
        return OracleTable(list(ids), self.psnr[rows], self.entries, self.fuser)

    def to_json(self) -> str:
        return json.dumps({
            "fuser": self.fuser,
            "entries": [list(e) for e in self.entries],
            "scenes": [
                {"id": i, "argmax": int(a), "psnr": [round(float(v), 6) for v in row]}
                for i, a, row in zip(self.ids, self.argmax, self.psnr)
            ],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "OracleTable":
        d = json.loads(text)
        table = cls([s["id"] for s in d["scenes"]], np.array([s["psnr"] for s in d["scenes"]], dtype=np.float64),
                    [tuple(e) for e in d["entries"]], d["fuser"])
        stored = np.array([s["argmax"] for s in d["scenes"]])
        if not np.array_equal(stored, table.argmax):
            raise TrainingError("oracle table argmax inconsistent with stored PSNRs")
        return table


def oracle_label(data: SceneData, fuser, catalog: BracketingCatalog) -> tuple[np.ndarray, int]:
    """Exhaustive fusion over the catalog; returns (psnrs, argmax) with lowest-index ties."""
    values = bracket_psnrs(data, fuser, [e.indices for e in catalog])
    return values, int(np.argmax(values))


def build_oracle(datas: Sequence[SceneData], fuser, catalog: BracketingCatalog) -> OracleTable:
    rows = [oracle_label(d, fuser, catalog)[0] for d in datas]
    return OracleTable([d.id for d in datas], np.array(rows), [e.indices for e in catalog], fuser.name)


# --- fusion network training ------------------------------------------------------

def mef_train_step(images: np.ndarray, targets: np.ndarray, store: ParamStore, cfg: MefConfig,
                   lr: float) -> float:
    """One Adam step on the batch-mean Charbonnier loss; returns the pre-step loss."""
    try:
        pred = mefnet.mef_forward(images, store, cfg)
        loss = mefnet.charbonnier_loss(pred, targets)
        store.zero_grad()
        loss.backward()
    except GraphError as e:
        raise TrainingError(f"fusion training diverged: {e}") from e
    adam_step(store, lr)
    return loss.item()


def stage1_draws(seed: int, epoch: int, n_scenes: int, n_catalog: int) -> np.ndarray:
    """Uniform catalog entry per training scene for one epoch."""
    return rng_for(seed, "stage1", "draw", epoch).integers(0, n_catalog, n_scenes)


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def mef_val_psnr(store: ParamStore, cfg: MefConfig, pairs: Sequence[tuple[SceneData, tuple[int, ...]]]) -> float:
    if not pairs:
        return float("nan")
    fuser = LearnedFuser(store, cfg)
    vals = [psnr(fuser.fuse(d, [b])[0], d.gt) for d, b in pairs]
    return float(np.mean(vals))


def _emit(history: list, logger, entry: dict) -> None:
    history.append(entry)
    if logger is not None:
        logger(entry)
    log.info("%s", entry)


def stage1_train_mef(train: Sequence[SceneData], val: Sequence[SceneData], catalog: BracketingCatalog,
                     cfg: MefConfig, tcfg: TrainConfig, seed: int, logger=None,
                     store: ParamStore | None = None):
    """Fusion pretraining on uniformly random brackets; returns (best store, history)."""
    if not train:
        raise TrainingError("stage 1 needs training scenes")
    store = store.copy() if store is not None else mefnet.init_params(cfg, derive_seed(seed, "mef-init"))
    vrng = rng_for(seed, "stage1", "val")
    pairs = [(d, catalog[int(i)].indices) for d in val
             for i in vrng.integers(0, len(catalog), tcfg.val_brackets)]
    history: list = []
    best_val = mef_val_psnr(store, cfg, pairs)
    best = store.copy()
    _emit(history, logger, {"stage": 1, "epoch": 0, "loss": None, "mean_reward": None, "val_psnr": best_val})
    for epoch in range(1, tcfg.stage1_epochs + 1):
        draws = stage1_draws(seed, epoch, len(train), len(catalog))
        rng = rng_for(seed, "stage1", "epoch", epoch)
        losses = []
        for batch in _batches(rng.permutation(len(train)), tcfg.batch_size):
            imgs, tgts = [], []
            for i in batch:
                sel = train[i].stack[list(catalog[int(draws[i])].indices)]
                st, gt, _ = augment_arrays(sel, train[i].gt, None, rng, tcfg.crop, tcfg.augment)
                imgs.append(st)
                tgts.append(gt)
            losses.append(mef_train_step(np.stack(imgs), np.stack(tgts), store, cfg, tcfg.lr_mef))
        v = mef_val_psnr(store, cfg, pairs)
        _emit(history, logger, {"stage": 1, "epoch": epoch, "loss": float(np.mean(losses)),
                                "mean_reward": None, "val_psnr": v})
        if pairs and v > best_val or not pairs:
            best_val, best = v, store.copy()
    return best, history


# --- selection network training ---------------------------------------------------

def ebs_inputs(datas: Sequence[SceneData], cfg: EbsConfig, rng: np.random.Generator | None = None):
    """Stacked previews and histograms; with ``rng``, each preview gets a random
    rotation/flip and its histogram is recomputed from the transformed preview."""
    xs, hs = [], []
    for d in datas:
        if rng is None:
            xs.append(d.preview)
            hs.append(d.hist)
        else:
            x = dihedral(d.preview, int(rng.integers(0, 8)))
            xs.append(x)
            hs.append(hist_pyramid(np.transpose(x, (1, 2, 0)), cfg.bins).values)
    return np.stack(xs).astype(np.float32), np.stack(hs).astype(np.float32)


def policy_probs(datas: Sequence[SceneData], store: ParamStore, cfg: EbsConfig, batch: int = 16) -> np.ndarray:
    out = []
    for i in range(0, len(datas), batch):
        x, h = ebs_inputs(datas[i:i + batch], cfg)
        out.append(ops.softmax(ebsnet.forward_logits(x, h, store, cfg)).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, cfg.n_actions))


def argmax_selections(datas, store, cfg) -> np.ndarray:
    return np.array([ebsnet.select(p) for p in policy_probs(datas, store, cfg)], dtype=int)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return ops.scale(ops.sum(ops.take(ops.log_softmax(logits), labels)), -1.0 / logits.shape[0])


def stage2_pretrain_ebs(train: Sequence[SceneData], labels: np.ndarray, cfg: EbsConfig, tcfg: TrainConfig,
                        seed: int, val: Sequence[SceneData] = (), val_table: OracleTable | None = None,
                        logger=None, store: ParamStore | None = None):
    """Cross-entropy towards the oracle argmax; returns (store, history)."""
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (len(train),):
        raise TrainingError("one oracle label per training scene required")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= cfg.n_actions:
        raise TrainingError(f"oracle label outside catalog range [0, {cfg.n_actions})")
    store = store.copy() if store is not None else ebsnet.init_params(cfg, derive_seed(seed, "ebs-init"))
    history: list = []

    def report(epoch, loss):
        agree = float(np.mean(argmax_selections(train, store, cfg) == labels))
        entry = {"stage": 2, "epoch": epoch, "loss": loss, "mean_reward": None, "top1_agreement": agree,
                 "val_psnr": None}
        if val and val_table is not None:
            sel = argmax_selections(val, store, cfg)
            entry["val_psnr"] = float(np.mean([val_table.row(d.id)[s] for d, s in zip(val, sel)]))
        _emit(history, logger, entry)

    report(0, None)
    if cfg.n_actions == 1:
        return store, history
    for epoch in range(1, tcfg.stage2_epochs + 1):
        rng = rng_for(seed, "stage2", "epoch", epoch)
        losses = []
        for batch in _batches(rng.permutation(len(train)), tcfg.batch_size):
            x, h = ebs_inputs([train[i] for i in batch], cfg, rng if tcfg.augment else None)
            loss = cross_entropy(ebsnet.forward_logits(x, h, store, cfg), labels[batch])
            store.zero_grad()
            loss.backward()
            adam_step(store, tcfg.lr_ebs)
            losses.append(loss.item())
        report(epoch, float(np.mean(losses)))
    return store, history


def reinforce_update(logits: Tensor, store: ParamStore, ids: Sequence[str],
                     psnr_fn: Callable[[int, int], float], state: RewardState, lr: float,
                     rng: np.random.Generator, clip: float = 5.0) -> tuple[float, float]:
    """Sample one action per row, reward it against ``state``, take one Adam step
    on -mean(log p(s) * R), then record the new PSNRs.  Returns (mean R, loss)."""
    logp = ops.log_softmax(logits)
    probs = np.exp(logp.data.astype(np.float64))
    if np.isnan(probs).any():
        raise TrainingError("policy produced NaN probabilities")
    actions = np.array([ebsnet.sample_index(p, rng.random()) for p in probs])
    current = np.array([psnr_fn(i, int(a)) for i, a in enumerate(actions)])
    rewards = np.array([reward(state.prev(sid), c, clip) for sid, c in zip(ids, current)])
    loss = ops.scale(ops.sum(ops.mul(ops.take(logp, actions), rewards.astype(logp.dtype))), -1.0 / len(ids))
    store.zero_grad()
    try:
        loss.backward()
    except GraphError as e:
        raise TrainingError(f"policy-gradient step failed: {e}") from e
    adam_step(store, lr)
    for sid, c in zip(ids, current):
        state.update(sid, c)
    return float(rewards.mean()), loss.item()


def reinforce_step(batch: Sequence[SceneData], store: ParamStore, cfg: EbsConfig,
                   psnr_fn: Callable[[SceneData, int], float], state: RewardState, lr: float,
                   rng: np.random.Generator, clip: float = 5.0, augment: bool = False) -> tuple[float, float]:
    """Policy-gradient step for EBSNet on a batch of scenes with a frozen fuser."""
    x, h = ebs_inputs(batch, cfg, rng if augment else None)
    logits = ebsnet.forward_logits(x, h, store, cfg)
    return reinforce_update(logits, store, [d.id for d in batch], lambda i, a: psnr_fn(batch[i], a),
                            state, lr, rng, clip)


class PsnrCache:
    """Memoized PSNR of (scene, catalog index) under a fuser that stays frozen."""

    def __init__(self, fuser, catalog: BracketingCatalog):
        self.fuser = fuser
        self.catalog = catalog
        self._memo: dict[tuple[str, int], float] = {}

    def __call__(self, data: SceneData, action: int) -> float:
        key = (data.id, int(action))
        if key not in self._memo:
            fused = self.fuser.fuse(data, [self.catalog[int(action)].indices])[0]
            self._memo[key] = psnr(fused, data.gt)
        return self._memo[key]


def pipeline_psnr(datas, ebs_store, ebs_cfg, fuser, catalog) -> np.ndarray:
    sel = argmax_selections(datas, ebs_store, ebs_cfg)
    return np.array([psnr(fuser.fuse(d, [catalog[int(s)].indices])[0], d.gt) for d, s in zip(datas, sel)])


def stage3_joint(train: Sequence[SceneData], val: Sequence[SceneData], catalog: BracketingCatalog,
                 ebs_store: ParamStore, ebs_cfg: EbsConfig, mef_store: ParamStore, mef_cfg: MefConfig,
                 tcfg: TrainConfig, seed: int, logger=None):
    """Alternate policy-gradient EBSNet phases and fusion phases every
    ``alternation_period`` epochs, both at the pretraining rates times
    ``joint_lr_scale``.  Returns (ebs store, mef store, history, reward state)
    for the best validation epoch (epoch 0 = the pretrained pair)."""
    ebs_store, mef_store = ebs_store.copy(), mef_store.copy()
    lr_e = tcfg.lr_ebs * tcfg.joint_lr_scale
    lr_m = tcfg.lr_mef * tcfg.joint_lr_scale
    fuser = LearnedFuser(mef_store, mef_cfg)

    state = RewardState(init_policy="stage2-argmax")
    init_sel = argmax_selections(train, ebs_store, ebs_cfg)
    for d, s in zip(train, init_sel):
        state.update(d.id, psnr(fuser.fuse(d, [catalog[int(s)].indices])[0], d.gt))

    def val_score():
        return float(np.mean(pipeline_psnr(val, ebs_store, ebs_cfg, fuser, catalog))) if val else float("nan")

    history: list = []
    best_val = val_score()
    best = (ebs_store.copy(), mef_store.copy())
    _emit(history, logger, {"stage": 3, "epoch": 0, "phase": None, "loss": None, "mean_reward": None,
                            "val_psnr": best_val})
    cache = None
    selections = None
    for epoch in range(1, tcfg.stage3_epochs + 1):
        phase = "ebs" if ((epoch - 1) // tcfg.alternation_period) % 2 == 0 else "mef"
        boundary = (epoch - 1) % tcfg.alternation_period == 0
        rng = rng_for(seed, "stage3", "epoch", epoch)
        losses, rewards = [], []
        if phase == "ebs":
            if boundary or cache is None:
                cache = PsnrCache(fuser, catalog)
            if len(catalog) > 1:
                for batch in _batches(rng.permutation(len(train)), tcfg.batch_size):
                    r, l = reinforce_step([train[i] for i in batch], ebs_store, ebs_cfg, cache, state, lr_e,
                                          rng, tcfg.reward_clip, tcfg.augment)
                    rewards.append(r)
                    losses.append(l)
        else:
            if boundary or selections is None:
                selections = argmax_selections(train, ebs_store, ebs_cfg)
            for batch in _batches(rng.permutation(len(train)), tcfg.batch_size):
                imgs, tgts = [], []
                for i in batch:
                    sel = train[i].stack[list(catalog[int(selections[i])].indices)]
                    st, gt, _ = augment_arrays(sel, train[i].gt, None, rng, tcfg.crop, tcfg.augment)
                    imgs.append(st)
                    tgts.append(gt)
                losses.append(mef_train_step(np.stack(imgs), np.stack(tgts), mef_store, mef_cfg, lr_m))
            cache = None
        v = val_score()
        _emit(history, logger, {
            "stage": 3, "epoch": epoch, "phase": phase, "phase_start": boundary,
            "loss": float(np.mean(losses)) if losses else 0.0,
            "mean_reward": float(np.mean(rewards)) if rewards else (0.0 if phase == "ebs" else None),
            "val_psnr": v,
        })
        if v > best_val:
            best_val, best = v, (ebs_store.copy(), mef_store.copy())
    return best[0], best[1], history, state
