"""Derive the frozen acceptance thresholds from one default run.

Usage: python3 tests/calibrate.py RUN_DIR

RUN_DIR is the ``run`` directory the acceptance suite leaves under
EBSEL_ACCEPTANCE_OUT: it must hold report.json and ablate/report.json.
Writes tests/calibration.json.
"""

import json
import sys
from pathlib import Path

import numpy as np

# Selection thresholds fixed up front; calibration records where the
# brute-force oracle and the seeded random baseline sit relative to them.
MAX_MEAN_GAP = 1.0
MIN_MARGIN_OVER_RANDOM = 1.5


def calibrate(run_dir: Path) -> dict:
    report = json.loads((run_dir / "report.json").read_text())
    ablation = json.loads((run_dir / "ablate" / "report.json").read_text())
    s = report["summary"]
    rows = [r for r in ablation["rows"] if r["group"] == "branch"]
    full = np.array([r["mean_psnr"] for r in rows if r["variant"] == "full"])
    # seed-to-seed noise of the full model: the standard error of its mean
    noise = float(full.std(ddof=1) / np.sqrt(len(full)))
    paired = {}
    for name in ("semantic", "illumination"):
        other = np.array([r["mean_psnr"] for r in rows if r["variant"] == name])
        paired[name] = (full - other).tolist()
    return {
        "selection": {
            "max_mean_gap": MAX_MEAN_GAP,
            "min_margin_over_random": MIN_MARGIN_OVER_RANDOM,
            "oracle_mean_psnr": s["mean_oracle_psnr"],
            "random_mean_psnr": s["mean_random_psnr"],
            "random_mean_gap": s["mean_oracle_psnr"] - s["mean_random_psnr"],
            "headroom_over_random": s["mean_oracle_psnr"] - s["mean_random_psnr"] - MAX_MEAN_GAP,
        },
        "ablation": {
            "min_full_advantage": noise,
            "full_per_seed": full.tolist(),
            "paired_full_minus_branch": paired,
        },
    }


if __name__ == "__main__":
    out = Path(__file__).parent / "calibration.json"
    out.write_text(json.dumps(calibrate(Path(sys.argv[1])), indent=2, sort_keys=True) + "\n")
    print(out.read_text())
