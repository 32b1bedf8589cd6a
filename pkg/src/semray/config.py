"""Flat run configuration: defaults < config file < CLI flags.

Config files are line-oriented ``key = value`` text with ``#`` comments;
every key matches a RunConfig field and values are coerced to the field's
type (booleans accept true/false/yes/no/1/0).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class RunConfig:
    # dataset generation
    data_dir: str = "data"
    scenes: int = 8
    views: int = 8
    height: int = 48
    width: int = 48
    classes: int = 4
    template: str = "room"
    n_test: int = -1                 # -1: auto (scenes // 4, at least 1)
    # model
    channels: int = 32
    heads: int = 4
    base_channels: int = 8
    num_res_blocks: int = 1
    position_embedding: bool = True
    tau: float = 0.7
    variant: str = "full"
    n_coarse: int = 32
    n_fine: int = 32
    source_views: int = 4
    dtype: str = "f64"
    # training
    steps: int = 2000
    batch_rays: int = 256
    lr_init: float = 1e-3
    lr_final: float = 5e-5
    lambda_sem: float = 1.0
    lambda_photo: float = 1.0
    seed: int = 0
    ckpt_interval: int = 0           # 0: only the final checkpoint
    val_interval: int = 500
    density_min: int = 1
    density_max: int = 3
    hierarchical: bool = True
    # paths
    manifest: str = "data/manifest.txt"
    out_dir: str = "runs/run"
    ckpt: str = ""


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name, raw):
    kind = _FIELDS[name]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config field {name!r}: cannot parse bool from {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text):
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, raw)
    return updates


def load_config_file(path):
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def merge_config(file_updates, flag_updates):
    cfg = RunConfig()
    for updates in (file_updates, flag_updates):
        for key, value in updates.items():
            if value is None:
                continue
            setattr(cfg, key, value)
    return cfg
