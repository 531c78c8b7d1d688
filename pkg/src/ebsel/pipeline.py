"""Stage orchestration shared by the command line and the acceptance suite.

Every stage reads the dataset directory and earlier checkpoints, writes its
own artifacts under an output directory, and stamps checkpoints with the
config hash, seed, stage and model config needed to rebuild the model.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ebsnet, mefnet, scenes
from .config import RunConfig
from .ebsnet import EbsConfig
from .evaluation import evaluate, rows_to_csv, write_report
from .imaging import Bracketing, BracketingCatalog
from .mefnet import MefConfig
from .nn.checkpoint import CheckpointError, checkpoint_metadata, load_checkpoint, save_checkpoint
from .nn.params import ParamStore
from .seeding import derive_seed
from .training import (
    LearnedFuser,
    OracleTable,
    SceneData,
    TrainConfig,
    build_oracle,
    prepare,
    stage1_train_mef,
    stage2_pretrain_ebs,
    stage3_joint,
)

log = logging.getLogger(__name__)

LOG_NAME = "train_log.jsonl"


@dataclass
class Dataset:
    manifest: dict
    train: list[SceneData]
    val: list[SceneData]
    test: list[SceneData]

    def split(self, name: str) -> list[SceneData]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def load_data(data_dir, bins: int = 32, verify: bool = True) -> Dataset:
    manifest, loaded = scenes.read_dataset(data_dir, verify=verify)
    parts = scenes.split_scenes(manifest, loaded)
    return Dataset(manifest, *(prepare(parts[s], bins) for s in ("train", "val", "test")))


class JsonlLog:
    """Appends one JSON object per line; ``extra`` fields are added to each entry."""

    def __init__(self, path, **extra):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.extra = extra

    def __call__(self, entry: dict) -> None:
        with self.path.open("a") as f:
            f.write(json.dumps({**self.extra, **entry}, sort_keys=True) + "\n")


def read_log(path) -> list[dict]:
    p = Path(path)
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()] if p.exists() else []


# --- checkpoints ------------------------------------------------------------------

def checkpoint_meta(rc: RunConfig, kind: str, stage: int, model: dict, catalog: BracketingCatalog, **extra) -> dict:
    return {
        "kind": kind,
        "stage": stage,
        "config_hash": rc.hash(),
        "seed": rc.seed,
        "model": model,
        "catalog": {"J": catalog.J, "K": catalog.K, "entries": [list(e.indices) for e in catalog]},
        **extra,
    }


def save_model(path, store: ParamStore, meta: dict) -> str:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return save_checkpoint(path, store, meta)


def load_ebs(path) -> tuple[ParamStore, EbsConfig, dict]:
    meta = checkpoint_metadata(path)
    if meta.get("kind") != "ebs":
        raise CheckpointError(f"{path} is not a selection-network checkpoint")
    cfg = EbsConfig.from_dict(meta["model"])
    store = ebsnet.init_params(cfg, 0)
    load_checkpoint(path, store)
    return store, cfg, meta


def load_mef(path) -> tuple[ParamStore, MefConfig, dict]:
    meta = checkpoint_metadata(path)
    if meta.get("kind") != "mef":
        raise CheckpointError(f"{path} is not a fusion-network checkpoint")
    cfg = MefConfig.from_dict(meta["model"])
    store = mefnet.init_params(cfg, 0)
    load_checkpoint(path, store)
    return store, cfg, meta


def catalog_from_meta(meta: dict) -> BracketingCatalog:
    c = meta["catalog"]
    return BracketingCatalog(tuple(Bracketing(tuple(e)) for e in c["entries"]), c["J"], c["K"])


# --- stages -----------------------------------------------------------------------

def gen_data(rc: RunConfig, out) -> dict:
    d = rc["data"]
    made = scenes.generate_scenes(d["count"], rc.seed, rc.camera(), d["size"], d["preview_size"])
    return scenes.write_dataset(made, out, rc.seed, rc.camera(), tuple(d["split"]),
                                extra={"config_hash": rc.hash()})


def train_mef(rc: RunConfig, ds: Dataset, catalog: BracketingCatalog, seed: int, logger=None):
    tcfg = TrainConfig.from_run(rc)
    cfg = rc.mef_config(catalog.K)
    best, history = stage1_train_mef(ds.train, ds.val, catalog, cfg, tcfg, seed, logger)
    return best, cfg, history


def oracle_table(ds: Dataset, fuser, catalog: BracketingCatalog, splits: Sequence[str]) -> OracleTable:
    return build_oracle([d for s in splits for d in ds.split(s)], fuser, catalog)


def train_ebs(rc: RunConfig, ds: Dataset, table: OracleTable, cfg: EbsConfig, seed: int, logger=None):
    tcfg = TrainConfig.from_run(rc)
    labels = table.subset([d.id for d in ds.train]).argmax
    val_table = table.subset([d.id for d in ds.val]) if all(d.id in table.ids for d in ds.val) else None
    return stage2_pretrain_ebs(ds.train, labels, cfg, tcfg, seed, ds.val, val_table, logger)


def joint(rc: RunConfig, ds: Dataset, catalog: BracketingCatalog, ebs_store, ebs_cfg, mef_store, mef_cfg,
          seed: int, logger=None):
    tcfg = TrainConfig.from_run(rc)
    return stage3_joint(ds.train, ds.val, catalog, ebs_store, ebs_cfg, mef_store, mef_cfg, tcfg, seed, logger)


def evaluate_model(rc: RunConfig, test: Sequence[SceneData], ebs_store, ebs_cfg, fuser,
                   catalog: BracketingCatalog) -> dict:
    report, _ = evaluate(test, ebs_store, ebs_cfg, fuser, catalog, derive_seed(rc.seed, "eval"),
                         rc["eval"]["random_seeds"])
    return report


@dataclass
class Variant:
    """One fully trained configuration of the ablation grid."""

    name: str
    k: int
    use_semantic: bool = True
    use_illumination: bool = True
    seed_index: int = 0


def run_variant(rc: RunConfig, ds: Dataset, variant: Variant, seed: int, shared: dict | None = None,
                logger=None) -> dict:
    """Train stages 1-3 for one variant and score its test selections.

    ``shared`` may carry a stage-1 fusion store and its oracle table
    (keys ``mef``, ``table``) so variants that differ only in the selection
    network reuse them.
    """
    catalog = rc.catalog(variant.k)
    mef_cfg = rc.mef_config(variant.k)
    tag = dict(variant=variant.name)
    if shared and "mef" in shared:
        mef_store, table = shared["mef"], shared["table"]
    else:
        mef_store, mef_cfg, _ = train_mef(rc, ds, catalog, derive_seed(seed, "stage1"),
                                          _tagged(logger, **tag))
        table = oracle_table(ds, LearnedFuser(mef_store, mef_cfg), catalog, ("train", "val"))
    ebs_cfg = rc.ebs_config(len(catalog), use_semantic=variant.use_semantic,
                            use_illumination=variant.use_illumination)
    ebs2, h2 = train_ebs(rc, ds, table, ebs_cfg, derive_seed(seed, "stage2"), _tagged(logger, **tag))
    ebs3, mef3, h3, _ = joint(rc, ds, catalog, ebs2, ebs_cfg, mef_store, mef_cfg,
                              derive_seed(seed, "stage3"), _tagged(logger, **tag))
    report = evaluate_model(rc, ds.test, ebs3, ebs_cfg, LearnedFuser(mef3, mef_cfg), catalog)
    return {"variant": variant, "report": report, "mef": mef_store, "table": table,
            "stage2_agreement": h2[-1]["top1_agreement"]}


def _tagged(logger, **extra):
    if logger is None:
        return None
    return lambda entry: logger({**extra, **entry})


def ablate(rc: RunConfig, ds: Dataset, base: dict | None = None, logger=None) -> dict:
    """K sweep and branch ablation under shared seeds; returns the comparison table.

    ``base`` is the result of :func:`run_variant` for the default full model
    (K from the config); it supplies the K=default row and the stage-1
    fusion network and oracle table shared by the branch variants.
    """
    k_default = rc["catalog"]["K"]
    # every K shares the main run's seed so the sweep differs only in K
    seed = rc.seed
    rows = []
    k_results = {}
    for k in rc["ablate"]["k_values"]:
        if k == k_default and base is not None:
            res = base
        else:
            res = run_variant(rc, ds, Variant(f"K={k}", k), seed, logger=logger)
            if k == k_default:
                base = res
        k_results[k] = res
        rows.append(_ablation_row("k", f"K={k}", k, None, res))
    if base is None:
        base = run_variant(rc, ds, Variant(f"K={k_default}", k_default), seed, logger=logger)
    shared = {"mef": base["mef"], "table": base["table"]}
    branches = [("full", True, True), ("semantic", True, False), ("illumination", False, True)]
    for s in rc["ablate"]["branch_seeds"]:
        for name, sem, ill in branches:
            v = Variant(name, k_default, sem, ill, s)
            res = run_variant(rc, ds, v, derive_seed(seed, "branch", s), shared, logger)
            rows.append(_ablation_row("branch", name, k_default, s, res))
    return {"rows": rows, "summary": _ablation_summary(rows)}


def _ablation_row(group, name, k, seed_index, res) -> dict:
    s = res["report"]["summary"]
    return {"group": group, "variant": name, "k": k, "seed": seed_index,
            "mean_psnr": s["mean_psnr"], "mean_gap": s["mean_gap"],
            "mean_oracle_psnr": s["mean_oracle_psnr"], "mean_random_psnr": s["mean_random_psnr"],
            "stage2_agreement": res["stage2_agreement"]}


def _ablation_summary(rows) -> dict:
    out = {"k": {}, "branch": {}}
    for r in rows:
        if r["group"] == "k":
            out["k"][str(r["k"])] = r["mean_psnr"]
    names = sorted({r["variant"] for r in rows if r["group"] == "branch"})
    for n in names:
        vals = [r["mean_psnr"] for r in rows if r["group"] == "branch" and r["variant"] == n]
        out["branch"][n] = {"mean_psnr": float(np.mean(vals)), "per_seed": vals}
    return out


def write_ablation(report: dict, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jp, cp = out / "report.json", out / "report.csv"
    jp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    cp.write_text(rows_to_csv(report["rows"]))
    return jp, cp


# --- end to end ---------------------------------------------------------------------

def run_pipeline(rc: RunConfig, data_dir, out_dir, with_ablation: bool = False) -> dict:
    """gen-data (if ``data_dir`` has no manifest) through eval, writing every
    artifact the individual commands would write."""
    from . import plots

    start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out)
    data_dir = Path(data_dir)
    if not (data_dir / "manifest.json").exists():
        gen_data(rc, data_dir)
    ds = load_data(data_dir, rc["ebs"]["bins"])
    logger = JsonlLog(out / LOG_NAME)
    catalog = rc.catalog()
    seed = rc.seed

    mef1, mef_cfg, _ = train_mef(rc, ds, catalog, derive_seed(seed, "stage1"), logger)
    save_model(out / "mef_stage1.ckpt", mef1, checkpoint_meta(rc, "mef", 1, mef_cfg.to_dict(), catalog))
    table = oracle_table(ds, LearnedFuser(mef1, mef_cfg), catalog, ("train", "val"))
    (out / "oracle.json").write_text(table.to_json() + "\n")

    ebs_cfg = rc.ebs_config(len(catalog))
    ebs2, h2 = train_ebs(rc, ds, table, ebs_cfg, derive_seed(seed, "stage2"), logger)
    save_model(out / "ebs_stage2.ckpt", ebs2, checkpoint_meta(rc, "ebs", 2, ebs_cfg.to_dict(), catalog))
    ebs3, mef3, h3, _ = joint(rc, ds, catalog, ebs2, ebs_cfg, mef1, mef_cfg, derive_seed(seed, "stage3"), logger)
    save_model(out / "ebs_stage3.ckpt", ebs3, checkpoint_meta(rc, "ebs", 3, ebs_cfg.to_dict(), catalog))
    save_model(out / "mef_stage3.ckpt", mef3, checkpoint_meta(rc, "mef", 3, mef_cfg.to_dict(), catalog))

    report = evaluate_model(rc, ds.test, ebs3, ebs_cfg, LearnedFuser(mef3, mef_cfg), catalog)
    report["summary"]["config_hash"] = rc.hash()
    write_report(report, out)
    plots.training_curves(read_log(out / LOG_NAME), out / "training_curves.png")
    plots.scene_psnr(report, out / "scene_psnr.png")
    result = {"report": report, "stage2_history": h2, "stage3_history": h3, "out": out,
              "stage2_agreement": h2[-1]["top1_agreement"],
              "seconds": {"pipeline": time.perf_counter() - start}}
    if with_ablation:
        base = {"variant": Variant("full", catalog.K), "report": report, "mef": mef1, "table": table,
                "stage2_agreement": h2[-1]["top1_agreement"]}
        abl = ablate(rc, ds, base, JsonlLog(out / "ablate" / LOG_NAME))
        write_ablation(abl, out / "ablate")
        plots.ablation(abl, out / "ablate" / "ablation.png")
        result["ablation"] = abl
        result["seconds"]["ablation"] = time.perf_counter() - start - result["seconds"]["pipeline"]
    return result

