"""Pipeline configuration: one YAML file, validated, with per-stage fingerprints.

A fingerprint is the sha256 of the canonical JSON of exactly the settings a
stage depends on, chained with its upstream stage. Artifacts carry their
fingerprint so later stages can refuse stale inputs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .evaluate import VARIANTS
from .graphs import KINDS

DEFAULTS: dict = {
    "paths": {"records": [], "stations": None, "weather": None, "output_dir": "out"},
    "schema": "default",
    "split": {"test_days": 80, "validation_days": 40},
    "graphs": {"kinds": list(KINDS), "correlation_usage": "total"},
    "variant": "multi",
    "model": {"history": 6, "decoder_steps": 3, "hidden": 64, "head_widths": [32, 16]},
    "train": {"learning_rate": 1e-3, "batch_size": 32, "phase1_epochs": 60, "phase2_epochs": 40,
              "joint_epochs": 0, "patience": 10, "dropout_rate": 0.05, "seed": 0, "compute_dtype": "float64"},
    "uncertainty": {"iterations": 300, "alpha": 0.05, "seed": 0},
    "synth": {},
}


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict) and key != "synth":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``"train.seed=3"`` -> (["train", "seed"], 3). Values are parsed as YAML scalars."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from None
    return key.strip().split("."), value


def fingerprint(payload) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class PipelineConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path=None, overrides=(), require_inputs: bool = False) -> "PipelineConfig":
        raw: dict = {}
        base = Path.cwd()
        if path is not None:
            path = Path(path)
            try:
                raw = yaml.safe_load(path.read_text()) or {}
            except FileNotFoundError:
                raise ConfigError(f"config file {path} not found") from None
            except yaml.YAMLError as exc:
                raise ConfigError(f"config file {path}: {exc}") from None
            if not isinstance(raw, dict):
                raise ConfigError(f"config file {path} must hold a mapping")
            base = path.resolve().parent
        for item in overrides:
            keys, value = parse_override(item)
            node = raw
            for k in keys[:-1]:
                node = node.setdefault(k, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"override {item!r} descends into a non-mapping")
            node[keys[-1]] = value
        cfg = cls(_merge(DEFAULTS, raw), base)
        cfg.validate(require_inputs)
        return cfg

    def __getitem__(self, key):
        return self.data[key]

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.data["paths"]["output_dir"])

    def record_files(self) -> list[Path]:
        """Record CSVs: listed files, with directories expanded to their sorted *.csv files."""
        entries = self.data["paths"]["records"]
        entries = [entries] if isinstance(entries, (str, Path)) else list(entries or [])
        if not entries:
            raise ConfigError("paths.records names no ride-record input")
        files = []
        for e in entries:
            p = self.resolve(e)
            if p.is_dir():
                found = sorted(p.glob("*.csv"))
                if not found:
                    raise ConfigError(f"ride-record directory {p} holds no CSV files")
                files += found
            elif p.exists():
                files.append(p)
            else:
                raise ConfigError(f"ride-record input {p} does not exist")
        return files

    def optional_path(self, key: str) -> Path | None:
        value = self.data["paths"][key]
        if value is None:
            return None
        p = self.resolve(value)
        if not p.exists():
            raise ConfigError(f"paths.{key} {p} does not exist")
        return p

    def validate(self, require_inputs: bool = False) -> None:
        m, t, u, s = self["model"], self["train"], self["uncertainty"], self["split"]
        for sec, key in (("model", "history"), ("model", "decoder_steps"), ("model", "hidden"),
                         ("train", "batch_size"), ("train", "phase1_epochs"), ("train", "phase2_epochs"),
                         ("train", "joint_epochs"), ("train", "patience"), ("train", "seed"),
                         ("uncertainty", "iterations"), ("uncertainty", "seed"),
                         ("split", "test_days"), ("split", "validation_days")):
            if not isinstance(self[sec][key], int) or isinstance(self[sec][key], bool):
                raise ConfigError(f"{sec}.{key} must be an integer, got {self[sec][key]!r}")
        if not m["history"] >= m["decoder_steps"] >= 1:
            raise ConfigError(f"need history >= decoder_steps >= 1, got {m['history']} and {m['decoder_steps']}")
        if m["hidden"] < 1 or any(int(w) < 1 for w in m["head_widths"]):
            raise ConfigError("layer widths must be positive")
        if not 0.0 <= float(t["dropout_rate"]) < 1.0:
            raise ConfigError(f"train.dropout_rate must lie in [0, 1), got {t['dropout_rate']}")
        if float(t["learning_rate"]) <= 0:
            raise ConfigError("train.learning_rate must be positive")
        if t["compute_dtype"] not in ("float32", "float64"):
            raise ConfigError("train.compute_dtype must be float32 or float64")
        if min(t["batch_size"], t["patience"]) < 1 or min(t["phase1_epochs"], t["phase2_epochs"], t["joint_epochs"]) < 0:
            raise ConfigError("batch_size and patience must be >= 1 and epochs >= 0")
        if not 0.0 < float(u["alpha"]) < 1.0:
            raise ConfigError(f"uncertainty.alpha must lie in (0, 1), got {u['alpha']}")
        if u["iterations"] < 1:
            raise ConfigError("uncertainty.iterations must be >= 1")
        if s["test_days"] < 1 or s["validation_days"] < 1:
            raise ConfigError("split lengths must be at least one day")
        kinds = self["graphs"]["kinds"]
        unknown = [k for k in kinds if k not in KINDS]
        if unknown:
            raise ConfigError(f"unknown graph kinds {unknown}; choose from {list(KINDS)}")
        if self["graphs"]["correlation_usage"] not in ("total", "inflow", "outflow"):
            raise ConfigError("graphs.correlation_usage must be total, inflow or outflow")
        if self["variant"] not in VARIANTS:
            raise ConfigError(f"unknown variant {self['variant']!r}; choose from {sorted(VARIANTS)}")
        missing = [k for k in VARIANTS[self["variant"]] if k not in kinds]
        if missing:
            raise ConfigError(f"variant {self['variant']} needs graph kinds {missing} that graphs.kinds omits")
        if require_inputs:
            self.record_files()
            self.optional_path("stations")
            self.optional_path("weather")

    # stage fingerprints -------------------------------------------------

    def ingest_fingerprint(self) -> str:
        p = self["paths"]
        return fingerprint({"stage": "ingest", "records": p["records"], "stations": p["stations"],
                            "weather": p["weather"], "schema": self["schema"]})

    def graphs_fingerprint(self) -> str:
        return fingerprint({"stage": "graphs", "upstream": self.ingest_fingerprint(), "split": self["split"],
                            "graphs": self["graphs"]})

    def train_fingerprint(self) -> str:
        return fingerprint({"stage": "train", "upstream": self.graphs_fingerprint(), "variant": self["variant"],
                            "model": self["model"], "train": self["train"]})

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)
