"""Run configuration: defaults <- JSON file <- command-line flags."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .ebsnet import EbsConfig
from .imaging import CameraModel, build_catalog, span_predicate
from .mefnet import MefConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "data": {
        "count": 40,
        "size": 256,
        "preview_size": 128,
        "split": [0.6, 0.2, 0.2],
    },
    "camera": {
        "gamma": 2.2,
        "bit_depth": 8,
        "noise_sigma_read": 0.0,
        "noise_sigma_shot": 0.0,
    },
    "catalog": {
        "J": 10,
        "K": 3,
        # null keeps all C(J, K) brackets; {"max_first": a, "min_last": b} keeps
        # brackets whose longest index <= a and shortest index >= b.
        "prune": None,
    },
    "ebs": {
        "bins": 32,
        "conv_channels": [16, 32, 64],
        "semantic_width": 256,
        "hist_channels": [16, 16],
        "illumination_width": 128,
        "fused_width": 128,
        "use_semantic": True,
        "use_illumination": True,
    },
    "mef": {
        "widths": [16, 16],
        "downscale": 4,
    },
    "train": {
        "lr_mef": 1e-3,
        "lr_ebs": 1e-4,
        "joint_lr_scale": 0.1,
        "batch_size": 8,
        "alternation_period": 10,
        "reward_clip": 5.0,
        "stage1_epochs": 60,
        "stage2_epochs": 150,
        "stage3_epochs": 20,
        "crop": 128,
        "augment": True,
        "val_brackets": 4,
    },
    "eval": {
        "random_seeds": 10,
    },
    "ablate": {
        "k_values": [1, 2, 3, 10],
        "branch_seeds": [0, 1, 2],
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def set_path(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


class RunConfig:
    """Resolved configuration with a content hash stable under key order."""

    def __init__(self, values: dict | None = None):
        self.values = _merge(DEFAULTS, values or {})
        self.validate()

    @classmethod
    def resolve(cls, file: str | Path | None = None, overrides: dict | None = None) -> "RunConfig":
        merged = copy.deepcopy(DEFAULTS)
        if file is not None:
            try:
                loaded = json.loads(Path(file).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config {file}: {e}") from e
            if not isinstance(loaded, dict):
                raise ConfigError("config file must hold a JSON object")
            merged = _merge(merged, loaded)
        for dotted, value in (overrides or {}).items():
            if value is not None:
                set_path(merged, dotted, value)
        return cls(merged)

    def __getitem__(self, key):
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        t = v["train"]
        for key in ("lr_mef", "lr_ebs", "joint_lr_scale", "batch_size", "alternation_period", "reward_clip"):
            if not t[key] > 0:
                raise ConfigError(f"train.{key} must be positive")
        for key in ("stage1_epochs", "stage2_epochs", "stage3_epochs"):
            if t[key] < 0:
                raise ConfigError(f"train.{key} must be >= 0")
        if v["data"]["count"] < 1:
            raise ConfigError("data.count must be >= 1")
        if abs(sum(v["data"]["split"]) - 1.0) > 1e-9:
            raise ConfigError("data.split ratios must sum to 1")
        try:
            self.camera()
            self.catalog()
            self.ebs_config()
            self.mef_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=2)

    def hash(self) -> str:
        canon = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "config.resolved.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"config": self.values, "config_hash": self.hash()}
        path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        return path

    # typed views

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def camera(self) -> CameraModel:
        return CameraModel(**self.values["camera"])

    def catalog(self, k: int | None = None):
        c = self.values["catalog"]
        prune = c["prune"]
        pred = span_predicate(prune["max_first"], prune["min_last"]) if prune else None
        return build_catalog(c["J"], c["K"] if k is None else k, pred)

    def ebs_config(self, n_actions: int | None = None, **changes) -> EbsConfig:
        e = dict(self.values["ebs"])
        e.update(changes)
        if n_actions is None:
            n_actions = len(self.catalog())
        return EbsConfig(preview_size=self.values["data"]["preview_size"], n_actions=n_actions,
                         **{k: tuple(x) if isinstance(x, list) else x for k, x in e.items()})

    def mef_config(self, k: int | None = None) -> MefConfig:
        m = self.values["mef"]
        return MefConfig(k=self.values["catalog"]["K"] if k is None else k, size=self.values["data"]["size"],
                         widths=tuple(m["widths"]), downscale=m["downscale"])
