"""Experiment configuration: a sectioned key-value text format with a
strict schema, stable canonicalization and content hashing.

Unknown sections or keys are rejected; ``--set section.key=value``
overrides merge before canonicalization so the config hash always binds
the effective configuration.
"""

from __future__ import annotations

import hashlib

from .errors import ConfigError

# (type, default); type in {int, float, str, bool}
SCHEMA: dict[str, dict[str, tuple[str, str]]] = {
    "phantom": {
        "seed": ("int", "0"),
        "unlabeled_cases": ("int", "50"),
        "labeled_cases": ("int", "10"),
        "test_cases": ("int", "3"),
        "depth": ("int", "40"),
        "height": ("int", "64"),
        "width": ("int", "64"),
        "organs": ("int", "6"),
        "noise_sigma": ("float", "20.0"),
    },
    "preprocess": {
        "input_dir": ("str", ""),
        "out_size": ("int", "64"),
        "target_spacing": ("str", "median"),
    },
    "arch": {
        "base_width": ("int", "16"),
        "channel_mults": ("str", "1,1,2"),
        "res_blocks": ("int", "1"),
        "attn_levels": ("str", "2"),
        "in_channels": ("int", "1"),
        "out_channels": ("int", "1"),
    },
    "schedule": {
        "T": ("int", "200"),
        "beta_start": ("float", "1e-4"),
        "beta_end": ("float", "0.02"),
        "kind": ("str", "linear"),
    },
    "pretrain": {
        "slices_dir": ("str", ""),
        "iterations": ("int", "5000"),
        "batch_size": ("int", "8"),
        "lr_start": ("float", "2e-4"),
        "lr_end": ("float", "2e-5"),
        "lr_schedule": ("str", "linear"),
        "ema_momentum": ("float", "0.9999"),
        "checkpoint_every": ("int", "1000"),
        "augment_hflip": ("bool", "true"),
        "seed": ("int", "0"),
        "log_every": ("int", "1"),
    },
    "sample": {
        "checkpoint": ("str", ""),
        "count": ("int", "4"),
        "windows": ("str", "350:40"),
        "grid_cols": ("int", "4"),
        "seed": ("int", "0"),
    },
    "finetune": {
        "checkpoint": ("str", ""),
        "slices_dir": ("str", ""),
        "strategy": ("str", "decoder"),
        "t_init": ("int", "0"),
        "iterations": ("int", "1000"),
        "batch_size": ("int", "4"),
        "base_lr": ("float", "1e-4"),
        "head_lr_scale": ("float", "10.0"),
        "head_weight_decay": ("float", "1e-3"),
        "body_weight_decay": ("float", "1e-4"),
        "loss_weight": ("float", "0.5"),
        "dice_eps": ("float", "1e-5"),
        "head_hidden": ("int", "16"),
        "label_ratio": ("float", "1.0"),
        "require_coverage": ("bool", "false"),
        "use_ema": ("bool", "true"),
        "seed": ("int", "0"),
        "eval_every": ("int", "100"),
        "val_fraction": ("float", "0.1"),
        "include_middle": ("bool", "false"),
        "per_class_dice": ("bool", "false"),
    },
    "evaluate": {
        "checkpoint": ("str", ""),
        "slices_dir": ("str", ""),
        "k": ("int", "3"),
        "extractor": ("str", "rfcnn-v1"),
        "extractor_seed": ("int", "90210"),
    },
}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


_PARSERS = {"int": int, "float": float, "str": str.strip, "bool": _parse_bool}


class ExperimentConfig:
    """Validated view over the sectioned key-value document."""

    def __init__(self, values: dict[tuple[str, str], str] | None = None):
        self.values: dict[tuple[str, str], str] = {}
        for (section, key), raw in (values or {}).items():
            self.set(section, key, raw)

    def set(self, section: str, key: str, raw: str):
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        kind = SCHEMA[section][key][0]
        try:
            _PARSERS[kind](raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from None
        self.values[(section, key)] = raw.strip()

    def get(self, section: str, key: str):
        kind, default = SCHEMA[section][key]
        raw = self.values.get((section, key), default)
        return _PARSERS[kind](raw)

    def canonical(self) -> str:
        lines = []
        current = None
        for (section, key), value in sorted(self.values.items()):
            if section != current:
                lines.append(f"[{section}]")
                current = section
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + ("\n" if lines else "")

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


def parse_config(text: str) -> ExperimentConfig:
    """Parse the sectioned document; '#' starts a comment, '=' binds."""
    cfg = ExperimentConfig()
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown config section {section!r}")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        cfg.set(section, key.strip(), value.strip())
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            return parse_config(f.read())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """Merge repeatable ``--set section.key=value`` overrides."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set needs KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        if "." not in key:
            raise ConfigError(f"--set key must be section.key, got {key!r}")
        section, _, name = key.strip().partition(".")
        cfg.set(section, name, value.strip())
    return cfg
