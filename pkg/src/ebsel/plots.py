"""Report figures.  Rendered off-screen and written next to the JSON/CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def training_curves(entries: list[dict], path) -> Path:
    """Loss and validation PSNR per stage from a JSONL training log."""
    stages = sorted({e["stage"] for e in entries if "variant" not in e})
    fig, axes = plt.subplots(2, max(len(stages), 1), figsize=(4 * max(len(stages), 1), 5), squeeze=False)
    for col, stage in enumerate(stages):
        rows = [e for e in entries if e["stage"] == stage and "variant" not in e]
        ep = [e["epoch"] for e in rows]
        loss = [e["loss"] if e["loss"] is not None else float("nan") for e in rows]
        val = [e["val_psnr"] if e.get("val_psnr") is not None else float("nan") for e in rows]
        axes[0, col].plot(ep, loss, color="tab:blue")
        axes[0, col].set_title(f"stage {stage} loss")
        axes[1, col].plot(ep, val, color="tab:green")
        axes[1, col].set_title(f"stage {stage} val PSNR (dB)")
        axes[1, col].set_xlabel("epoch")
        if stage == 3:
            for e in rows:
                if e.get("phase_start"):
                    for ax in axes[:, col]:
                        ax.axvline(e["epoch"] - 0.5, color="0.7", lw=0.8)
    return _save(fig, path)


def scene_psnr(report: dict, path) -> Path:
    """Per-scene achieved, oracle and random-selection PSNR."""
    rows = report["rows"]
    x = range(len(rows))
    fig, ax = plt.subplots(figsize=(max(5, 0.6 * len(rows) + 2), 3.5))
    ax.plot(x, [r["oracle_psnr"] for r in rows], "k_", ms=14, mew=2, label="oracle")
    ax.plot(x, [r["psnr"] for r in rows], "o", color="tab:blue", label="selected")
    ax.plot(x, [r["random_psnr"] for r in rows], "x", color="tab:red", label="random")
    ax.set_xticks(list(x), [r["scene"] for r in rows], rotation=60, fontsize=7)
    ax.set_ylabel("PSNR vs GT (dB)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def ablation(report: dict, path) -> Path:
    """Mean test PSNR per K and per branch configuration."""
    summary = report["summary"]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    ks = sorted(summary["k"], key=int)
    a.bar(ks, [summary["k"][k] for k in ks], color="tab:blue")
    a.set_xlabel("K")
    a.set_ylabel("mean test PSNR (dB)")
    names = list(summary["branch"])
    means = [summary["branch"][n]["mean_psnr"] for n in names]
    b.bar(names, means, color="tab:orange")
    for i, n in enumerate(names):
        b.plot([i] * len(summary["branch"][n]["per_seed"]), summary["branch"][n]["per_seed"], "k.")
    seeds = [v for n in names for v in summary["branch"][n]["per_seed"]]
    for ax, vals in ((a, [summary["k"][k] for k in ks]), (b, means + seeds)):
        if vals:
            lo, hi = min(vals), max(vals)
            ax.set_ylim(lo - 1.0, hi + 0.5)
    return _save(fig, path)
