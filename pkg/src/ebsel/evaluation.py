"""Test-set evaluation against the brute-force oracle, and the branch / K
ablations."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .ebsnet import EbsConfig
from .imaging import BracketingCatalog
from .nn.params import ParamStore
from .seeding import rng_for
from .training import OracleTable, SceneData, argmax_selections, build_oracle

REPORT_FIELDS = ["scene", "selected", "bracket", "psnr", "oracle_index", "oracle_bracket", "oracle_psnr",
                 "gap", "random_psnr"]


def random_baseline(table: OracleTable, seed: int, n_seeds: int = 10) -> np.ndarray:
    """Per-scene PSNR of uniformly random selections, averaged over ``n_seeds`` draws."""
    n, m = table.psnr.shape
    draws = np.stack([rng_for(seed, "random-baseline", s).integers(0, m, n) for s in range(n_seeds)])
    return table.psnr[np.arange(n)[None, :], draws].mean(axis=0)


def evaluate_selections(table: OracleTable, selections: Sequence[int], seed: int = 0,
                        n_random: int = 10) -> dict:
    """Score fixed selections against a complete oracle table."""
    sel = np.asarray(selections, dtype=int)
    n = len(table.ids)
    achieved = table.psnr[np.arange(n), sel]
    oracle_idx = table.argmax
    best = table.best
    rand = random_baseline(table, seed, n_random)
    rows = []
    for i, sid in enumerate(table.ids):
        rows.append({
            "scene": sid,
            "selected": int(sel[i]),
            "bracket": "-".join(map(str, table.entries[sel[i]])),
            "psnr": float(achieved[i]),
            "oracle_index": int(oracle_idx[i]),
            "oracle_bracket": "-".join(map(str, table.entries[oracle_idx[i]])),
            "oracle_psnr": float(best[i]),
            "gap": float(best[i] - achieved[i]),
            "random_psnr": float(rand[i]),
        })
    summary = {
        "n_scenes": n,
        "fuser": table.fuser,
        "mean_psnr": float(achieved.mean()) if n else float("nan"),
        "mean_oracle_psnr": float(best.mean()) if n else float("nan"),
        "mean_gap": float((best - achieved).mean()) if n else float("nan"),
        "mean_random_psnr": float(rand.mean()) if n else float("nan"),
        "mean_uniform_expected_psnr": float(table.psnr.mean()) if n else float("nan"),
        "top1_agreement": float(np.mean(sel == oracle_idx)) if n else float("nan"),
    }
    summary["margin_over_random"] = summary["mean_psnr"] - summary["mean_random_psnr"]
    return {"summary": summary, "rows": rows}


def evaluate(test: Sequence[SceneData], ebs_store: ParamStore, ebs_cfg: EbsConfig, fuser,
             catalog: BracketingCatalog, seed: int = 0, n_random: int = 10,
             table: OracleTable | None = None) -> tuple[dict, OracleTable]:
    """Select with the policy's argmax, fuse, and compare with the oracle."""
    if table is None:
        table = build_oracle(test, fuser, catalog)
    sel = argmax_selections(test, ebs_store, ebs_cfg)
    return evaluate_selections(table, sel, seed, n_random), table


def rows_to_csv(rows: Sequence[dict], fields: Sequence[str] | None = None) -> str:
    fields = list(fields or (rows[0].keys() if rows else REPORT_FIELDS))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items() if k in fields})
    return buf.getvalue()


def write_report(report: dict, out_dir, stem: str = "report") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jp, cp = out / f"{stem}.json", out / f"{stem}.csv"
    jp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    cp.write_text(rows_to_csv(report["rows"]))
    return jp, cp
