"""Run configuration: YAML file, ``SPEECHSUM_*`` environment overrides, then flags."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .encoder import EncoderConfig
from .training import TrainConfig

ENV_PREFIX = "SPEECHSUM_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    lm: dict
    template: str
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: dict = field(default_factory=dict)
    preset: str = "full"
    asr: Optional[dict] = None
    manifests: dict = field(default_factory=dict)
    metrics: list = field(default_factory=lambda: ["rouge1", "rouge2", "rougeL"])
    systems: list = field(default_factory=lambda: ["text-reference", "cascade", "e2e"])
    reference_sets: list = field(default_factory=lambda: ["reference_summary", "lm_reference_summary"])
    style_suffixes: list = field(default_factory=lambda: [""])
    summary_max_tokens: int = 64
    output_dir: str = "runs"
    seed: int = 0
    base_dir: Path = Path(".")

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def manifest_path(self, key: str) -> Path:
        if key not in self.manifests:
            raise ConfigError(f"config has no manifests.{key} entry")
        return self.path(self.manifests[key])

    def train_config(self) -> TrainConfig:
        """The ``train`` section with the named preset(s) applied on top."""
        from .training import apply_presets

        base = {"seed": self.seed, "pooling_mode": self.encoder.pooling_mode, **self.train}
        return apply_presets(TrainConfig.from_dict(base), self.preset)


def _set_path(d: dict, keys: list[str], value) -> None:
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot override nested key under non-mapping {k!r}")
    d[keys[-1]] = value


def env_overrides(environ=None) -> dict:
    """``SPEECHSUM_TRAIN__MAX_STEPS=10`` -> ``{"train": {"max_steps": 10}}``."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__")]
        _set_path(out, keys, yaml.safe_load(raw))
    return out


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path, overrides: Optional[dict] = None, environ=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    raw = _merge(raw, env_overrides(environ))
    raw = _merge(raw, overrides or {})
    known = {f.name for f in fields(RunConfig)} - {"base_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    for req in ("lm", "template"):
        if req not in raw:
            raise ConfigError(f"{path}: missing required key {req!r}")
    enc = raw.get("encoder", {}) or {}
    enc_known = {f.name for f in fields(EncoderConfig)}
    if set(enc) - enc_known:
        raise ConfigError(f"{path}: unknown encoder keys {sorted(set(enc) - enc_known)}")
    train_known = {f.name for f in fields(TrainConfig)}
    if set(raw.get("train", {}) or {}) - train_known:
        raise ConfigError(f"{path}: unknown train keys {sorted(set(raw['train']) - train_known)}")
    try:
        cfg = RunConfig(**{**raw, "encoder": EncoderConfig(**enc), "train": raw.get("train", {}) or {}},
                        base_dir=path.parent)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for p in [cfg.template] + ([cfg.lm["path"]] if "path" in cfg.lm else []):
        if not cfg.path(p).exists():
            raise ConfigError(f"{path}: referenced file does not exist: {p}")
    return cfg
