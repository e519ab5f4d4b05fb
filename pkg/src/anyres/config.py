"""Flat ``section.key = value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .distill import TrainConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


# section -> key -> value parser; anything else is rejected
SCHEMA = {
    "model": {
        "patch_size": int,
        "native_side": int,
        "channels": int,
        "num_blocks": int,
        "num_heads": int,
        "mlp_ratio": float,
        "last_attention_identity": _bool,
        "checkpoint": str,
        "init_seed": int,
    },
    "train": {
        "epochs": int,
        "learning_rate": float,
        "weight_decay": float,
        "adam_beta1": float,
        "adam_beta2": float,
        "adam_epsilon": float,
        "trainable": str,
        "seed": int,
        "resize_short_min": int,
        "resize_short_max": int,
        "crop_min": int,
        "flip_prob": float,
        "crop_prob": float,
        "dataset": str,
        "store": str,
        "store_dtype": str,
        "output": str,
        "log": str,
    },
    "teacher": {
        "stride": int,
        "checkpoint": str,
    },
    "eval": {
        "images": str,
        "masks": str,
        "class_embeddings": str,
        "ignore_index": _opt_int,
        "mode": str,
        "stride": int,
        "checkpoint": str,
        "output": str,
    },
    "bench": {
        "strides": _int_list,
        "sub_batch": int,
        "warmup": int,
        "trials": int,
        "image_h": int,
        "image_w": int,
        "output": str,
        "checkpoint": str,
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict] = field(default_factory=lambda: {s: {} for s in SCHEMA})
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, section: str, key: str, default=None):
        return self.values[section].get(key, default)

    def path(self, section: str, key: str, default: str | None = None) -> Path | None:
        raw = self.get(section, key, default)
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def require_path(self, section: str, key: str, must_exist: bool = True) -> Path:
        p = self.path(section, key)
        if p is None:
            raise ConfigError(f"missing required setting {section}.{key}")
        if must_exist and not p.exists():
            raise ConfigError(f"{section}.{key}: path does not exist: {p}")
        return p

    def vit_config(self) -> ViTConfig:
        names = {f.name for f in fields(ViTConfig)}
        kwargs = {k: v for k, v in self.values["model"].items() if k in names}
        try:
            return ViTConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        kwargs = {k: v for k, v in self.values["train"].items() if k in names}
        try:
            return TrainConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc


def parse_config(text: str, base_dir=None) -> RunConfig:
    cfg = RunConfig(base_dir=Path(base_dir) if base_dir else Path.cwd())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        lhs, value = (part.strip() for part in line.split("=", 1))
        if "." not in lhs:
            raise ConfigError(f"line {lineno}: key {lhs!r} has no section")
        section, key = lhs.split(".", 1)
        if section not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown key {section}.{key}")
        try:
            cfg.values[section][key] = SCHEMA[section][key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {section}.{key}: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)
