"""Declarative run configuration: YAML file plus flat ``key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .data import BUNDLED
from .fusion import LAMBDA_MODES, POPULATIONS
from .model import ConfigError, ModelConfig

CONFIG_DIR = Path(__file__).parent / "configs"
METHODS = ("saap", "separate-cal", "weighted-fusion", "no-asi", "random")

DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/desk",
    "model": {"checkpoint": None, "config": {}},
    "train": {"steps": 800, "lr": 3e-3, "warmup": 50, "batch_size": 8, "seed": 0},
    "corpus": {"train": "bundled:train", "calib": "bundled:calib", "eval": "bundled:eval",
               "finetune": "bundled:finetune"},
    "calibration": {"count": 50, "seq_len": 128, "seed": 0},
    "importance": {"vector_order": 1, "aggregate": "sum"},
    "fusion": {"mode": "layer-mle", "fixed": [1.0, 1.0]},
    "population": "layer-kind",
    "method": "saap",
    "prune": {"ratio": 0.2, "protect": [0, 1, 2, -1], "uplift_mode": "proportional",
              "uplift_ratio": None},
    "quant": {"enabled": True, "L": 32, "N": 4, "rank": 8, "alpha": 16.0, "grouped": True},
    "recovery": {"lr": 1e-3, "warmup": 30, "batch_size": 4, "seq_len": None, "steps": 300,
                 "seed": 0},
    "eval": {"max_tokens": 65536, "gen_length": 64, "runs": 5, "throughput": True},
}

# config overlays for the ablation rows
PRESETS: dict[str, dict] = {
    "saap": {"method": "saap"},
    "separate-cal": {"method": "separate-cal"},
    "weighted-fusion": {"method": "weighted-fusion"},
    "no-asi": {"method": "no-asi"},
    "random": {"method": "random"},
    "dense-lora": {"quant": {"grouped": False}},
    "quantized-ungrouped": {"quant": {"L": 1}},
}

# CLI flag -> dotted config key
FLAG_KEYS = {
    "seed": "seed", "out": "out", "ratio": "prune.ratio", "protect": "prune.protect",
    "uplift_mode": "prune.uplift_mode", "fusion": "fusion.mode", "population": "population",
    "groups_L": "quant.L", "bits_N": "quant.N", "steps": "recovery.steps", "method": "method",
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict) and k != "config":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[k] = _merge(out[k], v, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip().lstrip("-")
    return key, yaml.safe_load(raw) if raw != "" else None


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    # model.config accepts any ModelConfig field; it is checked when built
    if parts[-1] not in node and parts[:2] != ["model", "config"]:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


class RunConfig:
    """Validated, hashable run configuration."""

    def __init__(self, data: dict, base_dir: Path | None = None):
        self.data = data
        self.base_dir = base_dir or Path.cwd()

    def __getitem__(self, key: str):
        node = self.data
        for p in key.split("."):
            node = node[p]
        return node

    @classmethod
    def load(cls, path: str | Path | None = None, overrides=(), preset: str | None = None) -> "RunConfig":
        data = copy.deepcopy(DEFAULTS)
        base_dir = None
        if path is not None:
            p = resolve_config_path(path)
            try:
                raw = yaml.safe_load(p.read_text()) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{p}: not valid YAML ({e})") from None
            if not isinstance(raw, dict):
                raise ConfigError(f"{p}: top level must be a mapping")
            preset = raw.pop("preset", None) if preset is None else preset
            data = _merge(data, raw)
            base_dir = p.parent
        if preset:
            if preset not in PRESETS:
                raise ConfigError(f"preset: unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
            data = _merge(data, PRESETS[preset])
        for item in overrides:
            key, value = item if isinstance(item, tuple) else parse_override(item)
            set_dotted(data, key, value)
        cfg = cls(data, base_dir)
        cfg.validate()
        return cfg

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() or p.exists() else (self.base_dir / p)

    def corpus(self, split: str):
        src = self["corpus." + split]
        if str(src).startswith("bundled:") or src in BUNDLED:
            return src
        return str(self.path(src))

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig.from_dict({**ModelConfig().to_dict(), **self["model.config"]}).validate()
        except TypeError as e:
            raise ConfigError(f"model.config: {e}") from None

    def validate(self) -> None:
        d = self.data

        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}")

        need(isinstance(d["seed"], int), "seed", "must be an integer")
        cal = d["calibration"]
        need(isinstance(cal["count"], int) and cal["count"] >= 2, "calibration.count",
             "D must be >= 2 because the fluctuation indicator uses the Bessel-corrected "
             "variance (divisor D - 1)")
        need(isinstance(cal["seq_len"], int) and cal["seq_len"] >= 2, "calibration.seq_len", "must be >= 2")
        need(d["fusion"]["mode"] in LAMBDA_MODES, "fusion.mode", f"expected one of {LAMBDA_MODES}")
        need(len(d["fusion"]["fixed"]) == 2 and min(d["fusion"]["fixed"]) > 0, "fusion.fixed",
             "needs two positive lambdas")
        need(d["population"] in POPULATIONS, "population", f"expected one of {POPULATIONS}")
        need(d["method"] in METHODS, "method", f"expected one of {METHODS}")
        need(d["importance"]["vector_order"] in (1, 2), "importance.vector_order", "must be 1 or 2")
        need(d["importance"]["aggregate"] in ("sum", "mean", "max", "prod"), "importance.aggregate",
             "expected sum, mean, max or prod")
        pr = d["prune"]
        need(isinstance(pr["ratio"], (int, float)) and 0 <= pr["ratio"] < 1, "prune.ratio", "must lie in [0, 1)")
        need(isinstance(pr["protect"], list) and all(isinstance(i, int) for i in pr["protect"]),
             "prune.protect", "must be a list of layer indices")
        need(pr["uplift_mode"] in ("proportional", "uplift"), "prune.uplift_mode",
             "expected proportional or uplift")
        q = d["quant"]
        need(isinstance(q["L"], int) and q["L"] >= 1, "quant.L", "must be a positive integer")
        need(isinstance(q["N"], int) and 2 <= q["N"] <= 8, "quant.N", "must lie in [2, 8]")
        need(isinstance(q["rank"], int) and q["rank"] >= 1, "quant.rank", "must be >= 1")
        need(q["alpha"] > 0, "quant.alpha", "must be positive")
        r = d["recovery"]
        for k in ("lr", "batch_size"):
            need(r[k] > 0, f"recovery.{k}", "must be positive")
        for k in ("warmup", "steps"):
            need(isinstance(r[k], int) and r[k] >= 0, f"recovery.{k}", "must be a non-negative integer")
        t = d["train"]
        need(isinstance(t["steps"], int) and t["steps"] >= 0, "train.steps", "must be a non-negative integer")
        ev = d["eval"]
        need(isinstance(ev["runs"], int) and ev["runs"] >= 3, "eval.runs", "throughput needs >= 3 runs")
        need(isinstance(ev["gen_length"], int) and ev["gen_length"] >= 1, "eval.gen_length", "must be >= 1")
        for split in ("train", "calib", "eval", "finetune"):
            src = d["corpus"][split]
            if not (str(src).startswith("bundled:") or src in BUNDLED):
                need(self.path(src).is_file(), f"corpus.{split}", f"file {src!r} does not exist")
        ck = d["model"]["checkpoint"]
        if ck is not None:
            need(self.path(ck).is_file(), "model.checkpoint", f"file {ck!r} does not exist")
        else:
            try:
                self.model_config()
            except ConfigError as e:
                raise ConfigError(f"model.config: {e}") from None

    def canonical(self) -> str:
        # the output location does not change results, so it stays out of the hash
        body = {k: v for k, v in self.data.items() if k != "out"}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def resolve_config_path(path: str | Path) -> Path:
    """A file path, or the name of a bundled config (``desk``, ``tiny``)."""
    p = Path(path)
    if p.is_file():
        return p
    bundled = CONFIG_DIR / f"{path}.yaml"
    if bundled.is_file():
        return bundled
    raise ConfigError(f"config file {str(path)!r} not found")
