"""Run configuration: JSON file, flag overrides, defaults.

Precedence is flags > config file > defaults; environment variables supply
credentials only (see :mod:`xmre.retrieval.live`) and never appear in the
resolved config. The resolved config is echoed verbatim as
``run_config.json`` into every artifact directory, and re-running a command
with that file reproduces the artifact bitwise under the mock backend.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from xmre.errors import ConfigError
from xmre.fusion import FusionConfig
from xmre.retrieval.store import RetrievalConfig
from xmre.training import TrainConfig

DEFAULTS: dict[str, Any] = {
    "dataset": {
        "train": "data/train.jsonl",
        "dev": "data/dev.jsonl",
        "test": "data/test.jsonl",
        "images": "data/images",
    },
    "store": "store",
    "output": "out",
    "scale": "toy",
    "seeds": [1, 2, 3, 4, 5],
    "model": {
        "d_text": 16,
        "d_vis": 32,
        "n_layers": 2,
        "heads_text": 2,
        "heads_vis": 2,
        "hidden_dim": 1024,
        "temp_text": None,
        "temp_vis": None,
        "vocab_size": 4096,
        "max_positions": 160,
    },
    "train": {
        "learning_rate": 3e-5,
        "warmup_frac": 0.06,
        "batch_size": 16,
        "epochs": 10,
        "max_steps": None,
        "k_text": 10,
        "k_image": 10,
        "no_selection": False,
        "no_consistency": False,
        "drop_object_evidence": False,
        "drop_image_evidence": False,
        "drop_visual_evidence": False,
        "stop_at_train_accuracy": None,
    },
    "retrieval": {
        "backend": "mock",
        "fixtures": "fixtures",
        "k": 10,
        "m": 3,
        "workers": 1,
        "page_timeout": 10.0,
    },
    "features": {
        "text": None,
        "image": None,
    },
}


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict) and not isinstance(value, dict):
            raise ConfigError(f"config key {dotted!r} must be an object")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value, prefix=dotted + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None) -> dict:
    """Defaults deep-merged with the JSON file at ``path`` (if given)."""

    if path is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return _merge(DEFAULTS, obj)


def apply_overrides(cfg: dict, overrides: dict[str, Any]) -> dict:
    """Apply dotted-path overrides (``train.max_steps`` -> value) in order."""

    cfg = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = cfg
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return cfg


def parse_set_flag(text: str) -> tuple[str, Any]:
    """Parse one ``--set section.key=value`` flag; values are JSON when they
    parse as JSON and raw strings otherwise."""

    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration for one CLI invocation."""

    raw: dict

    def __post_init__(self) -> None:
        merged = _merge(DEFAULTS, self.raw)  # validates keys and shapes
        object.__setattr__(self, "raw", merged)
        if self.scale not in ("toy", "paper"):
            raise ConfigError(f"unknown scale {self.scale!r}")
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")

    @property
    def scale(self) -> str:
        return self.raw["scale"]

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.raw["seeds"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output"])

    @property
    def store_dir(self) -> Path:
        return Path(self.raw["store"])

    def dataset_path(self, split: str) -> Path:
        try:
            return Path(self.raw["dataset"][split])
        except KeyError:
            raise ConfigError(f"config names no {split!r} dataset path") from None

    @property
    def images_dir(self) -> Path:
        return Path(self.raw["dataset"]["images"])

    def feature_path(self, kind: str) -> Path | None:
        value = self.raw["features"][kind]
        return None if value is None else Path(value)

    def fusion_config(self, n_labels: int) -> FusionConfig:
        model = self.raw["model"]
        return FusionConfig(n_labels=n_labels, scale=self.scale, **model)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        kwargs = dict(self.raw["train"])
        if kwargs["max_steps"] is not None:
            kwargs["max_steps"] = int(kwargs["max_steps"])
        cfg = TrainConfig(scale=self.scale, **kwargs)
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        return cfg

    def retrieval_config(self) -> RetrievalConfig:
        r = self.raw["retrieval"]
        return RetrievalConfig(
            k=int(r["k"]),
            m=int(r["m"]),
            workers=int(r["workers"]),
            page_timeout=float(r["page_timeout"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=1, sort_keys=True) + "\n"

    def echo(self, out_dir: str | Path) -> None:
        """Write the resolved config into an artifact directory."""

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run_config.json").write_text(self.to_json(), encoding="utf-8")


def resolve(
    config_path: str | Path | None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    cfg = load_config(config_path)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return RunConfig(cfg)
