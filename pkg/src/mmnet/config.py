"""Run configuration as a small ini file.

Four sections mirror the module configs key for key: [backbone] feeds
NetConfig (plus the correlation-filter knobs), [train] feeds TrainConfig,
[tracker] feeds TrackerConfig, [eval] feeds the evaluation protocol.
Unknown sections or keys are rejected rather than ignored so a typo cannot
silently fall back to a default, and the effective values are echoed into
every run manifest.
"""

from __future__ import annotations

import configparser
import copy
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .errors import ConfigError
from .heads import CFConfig
from .network import NetConfig
from .tracker import TrackerConfig
from .trainer import TrainConfig

# type markers: plain value = required type with this default;
# ("optional", T, default) admits "none"/empty -> None
DEFAULTS = {
    "backbone": {
        "preset": "full",
        "num_classes": 4,
        "label_radius": 2.0,
        "pos_weight_share": 0.5,
        "stride": 8,
        "lambda_cf": 0.01,
        "sigma": 0.1,
        "window": True,
    },
    "train": {
        "strategy": "vid-only",
        "epochs": ("optional", int, None),
        "pairs_per_epoch": 2000,
        "batch": 8,
        "momentum": 0.9,
        "lr_hi": ("optional", float, None),
        "lr_lo": ("optional", float, None),
        "lambda1": 1.0,
        "lambda2": 1.0,
        "lambda3": 1.0,
        "seed": 0,
        "weight_decay": 0.0,
        "clip_norm": 10.0,
    },
    "tracker": {
        "scales": 3,
        "scale_step": 1.0375,
        "scale_penalty": 0.9745,
        "scale_damping": 0.59,
        "window_weight": 0.176,
        "response_upsample": 16,
        "template_mode": "first",
        "ema_rate": 0.01,
        "beta": 0.5,
    },
    "eval": {
        "protocol": "ptb",
        "reinit_skip": 5,
        "burnin": 10,
        "workers": ("optional", int, None),
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _default_value(spec):
    return spec[2] if isinstance(spec, tuple) else spec


def _parse_value(section: str, key: str, raw: str, spec):
    raw = raw.strip()
    if isinstance(spec, tuple):
        if raw.lower() in ("", "none"):
            return None
        kind = spec[1]
    else:
        kind = type(spec)
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}"
        ) from None


@dataclass
class CliConfig:
    backbone: dict = field(default_factory=lambda: _section_defaults("backbone"))
    train: dict = field(default_factory=lambda: _section_defaults("train"))
    tracker: dict = field(default_factory=lambda: _section_defaults("tracker"))
    eval: dict = field(default_factory=lambda: _section_defaults("eval"))

    def net_config(self) -> NetConfig:
        b = self.backbone
        return NetConfig(
            backbone=BackboneConfig(preset=b["preset"]),
            cf=CFConfig(lambda_cf=b["lambda_cf"], sigma=b["sigma"],
                        window=b["window"]),
            num_classes=b["num_classes"], label_radius=b["label_radius"],
            pos_weight_share=b["pos_weight_share"], stride=b["stride"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(preset=self.backbone["preset"],
                           num_classes=self.backbone["num_classes"],
                           **self.train)

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(**self.tracker)

    def echo(self) -> dict:
        return {
            "backbone": dict(self.backbone),
            "train": dict(self.train),
            "tracker": dict(self.tracker),
            "eval": dict(self.eval),
        }


def _section_defaults(section: str) -> dict:
    return {k: copy.copy(_default_value(v)) for k, v in DEFAULTS[section].items()}


def load_cli_config(path: str) -> CliConfig:
    """Parse an ini file, rejecting unknown sections and keys."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh, source=path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    cfg = CliConfig()
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        table = getattr(cfg, section)
        for key, raw in parser.items(section):
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
            table[key] = _parse_value(section, key, raw, DEFAULTS[section][key])
    return cfg
