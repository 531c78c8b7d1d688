"""Command-line entry point: ``ebsel <command> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, fusion, pipeline, plots, scenes
from .config import ConfigError, RunConfig
from .evaluation import write_report
from .imaging import ImageError, LdrImage, load_png, save_png
from .nn.checkpoint import FORMAT_VERSION, CheckpointError
from .seeding import derive_seed
from .training import ClassicalFuser, LearnedFuser, OracleTable, TrainingError, policy_probs, prepare

log = logging.getLogger("ebsel")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _common(p: argparse.ArgumentParser, out_required: bool = True, out_help: str = "output directory") -> None:
    p.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    p.add_argument("--config", help="JSON config file merged over the defaults")
    p.add_argument("--out", required=out_required, help=out_help)
    p.add_argument("--threads", type=int, help="cap on BLAS worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ebsel", description="Exposure bracketing selection toolkit.")
    parser.add_argument("--version", action="version", version=f"ebsel {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--preview-size", type=int)

    p = sub.add_parser("fuse", help="classical exposure fusion of PNG images")
    _common(p, out_help="output PNG path")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--levels", type=int)

    p = sub.add_parser("pretrain-mef", help="stage 1: fusion network on random brackets")
    _common(p, out_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ckpt", help="checkpoint path (default OUT/mef_stage1.ckpt)")

    p = sub.add_parser("label-oracle", help="brute-force PSNR of every catalog entry")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="fusion checkpoint; omit for the classical fuser")
    p.add_argument("--splits", default="train,val")

    p = sub.add_parser("pretrain-ebs", help="stage 2: selection network towards oracle labels")
    _common(p, out_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ckpt", help="checkpoint path (default OUT/ebs_stage2.ckpt)")

    p = sub.add_parser("joint-train", help="stage 3: alternating joint training")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ebs-ckpt", required=True)
    p.add_argument("--mef-ckpt", required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", help="test-set selection quality against the oracle")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="selection network checkpoint")
    p.add_argument("--mef-ckpt", help="fusion checkpoint; omit for the classical fuser")
    p.add_argument("--split", default="test")

    p = sub.add_parser("ablate", help="K sweep and branch ablation")
    _common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("select", help="print the chosen bracket for one scene")
    _common(p, out_required=False)
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("fuse-learned", help="fuse a bracket of one scene with the fusion network")
    _common(p, out_help="output PNG path")
    p.add_argument("--scene", required=True)
    p.add_argument("--indices", required=True, help="comma-separated exposure indices, e.g. 1,2,7")
    p.add_argument("--ckpt", required=True)
    return parser


# --- helpers ------------------------------------------------------------------------

def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve(args, **overrides) -> RunConfig:
    flat = {"seed": args.seed, "threads": args.threads, **overrides}
    return RunConfig.resolve(args.config, flat)


def _record(out_dir, rc: RunConfig, argv, inputs=(), outputs=()) -> None:
    """config.resolved.json plus run.<command>.json holding the command line and
    input/output digests, so commands sharing a directory keep separate records."""
    out = Path(out_dir)
    rc.write(out)
    doc = {
        "command": list(argv),
        "version": __version__,
        "checkpoint_format": FORMAT_VERSION,
        "config_hash": rc.hash(),
        "seed": rc.seed,
        "inputs": {str(p): _sha(p) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): _sha(p) for p in outputs if Path(p).is_file()},
    }
    command = next(a for a in argv if a in COMMANDS)
    (out / f"run.{command}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest(data) -> Path:
    return Path(data) / "manifest.json"


def _out_dir(args, ckpt_default: str) -> tuple[Path, Path]:
    if args.out is None and args.ckpt is None:
        raise UsageError("one of --out or --ckpt is required")
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    ckpt = Path(args.ckpt) if args.ckpt else out / ckpt_default
    return out, ckpt


# --- commands -----------------------------------------------------------------------

def cmd_gen_data(args, argv) -> None:
    rc = _resolve(args, **{"data.count": args.count, "data.size": args.size, "data.preview_size": args.preview_size})
    out = Path(args.out)
    pipeline.gen_data(rc, out)
    _record(out, rc, argv, outputs=[_manifest(out)])


def cmd_fuse(args, argv) -> None:
    rc = _resolve(args)
    imgs = [load_png(p) for p in args.inputs]
    fused = fusion.exposure_fuse(imgs, args.levels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(fused, out)
    _record(out.parent, rc, argv, inputs=args.inputs, outputs=[out])


def cmd_pretrain_mef(args, argv) -> None:
    rc = _resolve(args, **{"train.stage1_epochs": args.epochs, "train.lr_mef": args.lr})
    out, ckpt = _out_dir(args, "mef_stage1.ckpt")
    ds = pipeline.load_data(args.data, rc["ebs"]["bins"])
    catalog = rc.catalog()
    store, cfg, _ = pipeline.train_mef(rc, ds, catalog, derive_seed(rc.seed, "stage1"),
                                       pipeline.JsonlLog(out / pipeline.LOG_NAME))
    pipeline.save_model(ckpt, store, pipeline.checkpoint_meta(rc, "mef", 1, cfg.to_dict(), catalog))
    plots.training_curves(pipeline.read_log(out / pipeline.LOG_NAME), out / "training_curves.png")
    _record(out, rc, argv, inputs=[_manifest(args.data)], outputs=[ckpt])


def cmd_label_oracle(args, argv) -> None:
    rc = _resolve(args)
    out = Path(args.out)
    splits = [s for s in args.splits.split(",") if s]
    bad = set(splits) - {"train", "val", "test"}
    if bad:
        raise UsageError(f"unknown split(s): {sorted(bad)}")
    ds = pipeline.load_data(args.data, rc["ebs"]["bins"])
    if args.ckpt:
        store, cfg, meta = pipeline.load_mef(args.ckpt)
        catalog = pipeline.catalog_from_meta(meta)
        fuser = LearnedFuser(store, cfg)
    else:
        catalog = rc.catalog()
        fuser = ClassicalFuser()
    table = pipeline.oracle_table(ds, fuser, catalog, splits)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle.json").write_text(table.to_json() + "\n")
    _record(out, rc, argv, inputs=[_manifest(args.data)] + ([args.ckpt] if args.ckpt else []),
            outputs=[out / "oracle.json"])


def _catalog_for(rc: RunConfig, entries):
    catalog = rc.catalog(len(entries[0]))
    if [e.indices for e in catalog] != [tuple(e) for e in entries]:
        raise ConfigError("oracle table catalog does not match the configured catalog")
    return catalog


def cmd_pretrain_ebs(args, argv) -> None:
    rc = _resolve(args, **{"train.stage2_epochs": args.epochs, "train.lr_ebs": args.lr})
    out, ckpt = _out_dir(args, "ebs_stage2.ckpt")
    table = OracleTable.from_json(Path(args.oracle).read_text())
    catalog = _catalog_for(rc, table.entries)
    ds = pipeline.load_data(args.data, rc["ebs"]["bins"])
    missing = [d.id for d in ds.train if d.id not in table.ids]
    if missing:
        raise ConfigError(f"oracle table lacks training scenes: {missing[:3]}")
    cfg = rc.ebs_config(len(catalog))
    store, _ = pipeline.train_ebs(rc, ds, table, cfg, derive_seed(rc.seed, "stage2"),
                                  pipeline.JsonlLog(out / pipeline.LOG_NAME))
    pipeline.save_model(ckpt, store, pipeline.checkpoint_meta(rc, "ebs", 2, cfg.to_dict(), catalog))
    plots.training_curves(pipeline.read_log(out / pipeline.LOG_NAME), out / "training_curves.png")
    _record(out, rc, argv, inputs=[_manifest(args.data), args.oracle], outputs=[ckpt])


def cmd_joint_train(args, argv) -> None:
    rc = _resolve(args, **{"train.stage3_epochs": args.epochs})
    out = Path(args.out)
    ebs, ebs_cfg, meta = pipeline.load_ebs(args.ebs_ckpt)
    mef, mef_cfg, mmeta = pipeline.load_mef(args.mef_ckpt)
    catalog = pipeline.catalog_from_meta(meta)
    if mmeta["catalog"]["K"] != catalog.K:
        raise ConfigError("selection and fusion checkpoints disagree on K")
    ds = pipeline.load_data(args.data, ebs_cfg.bins)
    ebs3, mef3, _, _ = pipeline.joint(rc, ds, catalog, ebs, ebs_cfg, mef, mef_cfg,
                                      derive_seed(rc.seed, "stage3"),
                                      pipeline.JsonlLog(out / pipeline.LOG_NAME))
    outs = [out / "ebs_stage3.ckpt", out / "mef_stage3.ckpt"]
    pipeline.save_model(outs[0], ebs3, pipeline.checkpoint_meta(rc, "ebs", 3, ebs_cfg.to_dict(), catalog))
    pipeline.save_model(outs[1], mef3, pipeline.checkpoint_meta(rc, "mef", 3, mef_cfg.to_dict(), catalog))
    plots.training_curves(pipeline.read_log(out / pipeline.LOG_NAME), out / "training_curves.png")
    _record(out, rc, argv, inputs=[_manifest(args.data), args.ebs_ckpt, args.mef_ckpt], outputs=outs)


def cmd_eval(args, argv) -> None:
    rc = _resolve(args)
    out = Path(args.out)
    if args.split not in ("train", "val", "test"):
        raise UsageError(f"unknown split {args.split!r}")
    ebs, ebs_cfg, meta = pipeline.load_ebs(args.ckpt)
    catalog = pipeline.catalog_from_meta(meta)
    if args.mef_ckpt:
        mef, mef_cfg, _ = pipeline.load_mef(args.mef_ckpt)
        fuser = LearnedFuser(mef, mef_cfg)
    else:
        fuser = ClassicalFuser()
    ds = pipeline.load_data(args.data, ebs_cfg.bins)
    report = pipeline.evaluate_model(rc, ds.split(args.split), ebs, ebs_cfg, fuser, catalog)
    report["summary"]["config_hash"] = rc.hash()
    jp, cp = write_report(report, out)
    plots.scene_psnr(report, out / "scene_psnr.png")
    _record(out, rc, argv, inputs=[_manifest(args.data), args.ckpt] + ([args.mef_ckpt] if args.mef_ckpt else []),
            outputs=[jp, cp])
    print(json.dumps(report["summary"], indent=2, sort_keys=True))


def cmd_ablate(args, argv) -> None:
    rc = _resolve(args)
    out = Path(args.out)
    ds = pipeline.load_data(args.data, rc["ebs"]["bins"])
    report = pipeline.ablate(rc, ds, logger=pipeline.JsonlLog(out / pipeline.LOG_NAME))
    jp, cp = pipeline.write_ablation(report, out)
    plots.ablation(report, out / "ablation.png")
    _record(out, rc, argv, inputs=[_manifest(args.data)], outputs=[jp, cp])
    print(json.dumps(report["summary"], indent=2, sort_keys=True))


def cmd_select(args, argv) -> None:
    rc = _resolve(args)
    ebs, cfg, meta = pipeline.load_ebs(args.ckpt)
    catalog = pipeline.catalog_from_meta(meta)
    scene = scenes.load_scene_dir(args.scene)
    if scene.preview.shape != (cfg.preview_size, cfg.preview_size):
        raise ConfigError(f"preview is {scene.preview.shape}, network expects {cfg.preview_size}")
    p = policy_probs(prepare([scene], cfg.bins), ebs, cfg)[0]
    s = int(np.argmax(p))
    doc = {"scene": scene.id, "index": s, "indices": list(catalog[s].indices), "p": [float(v) for v in p]}
    text = json.dumps(doc)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "selection.json").write_text(text + "\n")
        _record(out, rc, argv, inputs=[args.ckpt], outputs=[out / "selection.json"])


def cmd_fuse_learned(args, argv) -> None:
    rc = _resolve(args)
    try:
        indices = tuple(int(v) for v in args.indices.split(","))
    except ValueError as e:
        raise UsageError(f"bad --indices {args.indices!r}") from e
    mef, cfg, _ = pipeline.load_mef(args.ckpt)
    if len(indices) != cfg.k:
        raise ConfigError(f"fusion network takes K={cfg.k} images, got {len(indices)} indices")
    if list(indices) != sorted(set(indices)):
        raise ConfigError("indices must be strictly increasing")
    scene = scenes.load_scene_dir(args.scene)
    if indices[-1] >= len(scene.stack) or indices[0] < 0:
        raise ConfigError(f"indices must lie in [0, {len(scene.stack) - 1}]")
    data = prepare([scene])[0]
    fused = LearnedFuser(mef, cfg).fuse(data, [indices])[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(LdrImage(np.transpose(fused, (1, 2, 0)).astype(np.float64).clip(0, 1)), out)
    _record(out.parent, rc, argv, inputs=[args.ckpt], outputs=[out])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fuse": cmd_fuse,
    "pretrain-mef": cmd_pretrain_mef,
    "label-oracle": cmd_label_oracle,
    "pretrain-ebs": cmd_pretrain_ebs,
    "joint-train": cmd_joint_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "select": cmd_select,
    "fuse-learned": cmd_fuse_learned,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(str(e))
        return 1
    if args.command is None:
        sys.stderr.write(parser.format_help())
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = args.threads or RunConfig.resolve(args.config)["threads"]
        with threadpool_limits(limits=threads) if threads else contextlib.nullcontext():
            COMMANDS[args.command](args, ["ebsel", *argv])
    except (UsageError, ConfigError, ImageError, CheckpointError, scenes.DatasetError, ValueError) as e:
        sys.stderr.write(f"ebsel {args.command}: {e}\n")
        return 1
    except (TrainingError, OSError, RuntimeError) as e:
        sys.stderr.write(f"ebsel {args.command}: runtime failure: {e}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
