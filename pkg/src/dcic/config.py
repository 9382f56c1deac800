"""Flat key=value configuration and seeded random substreams.

Config files are plain text, one `section.key=value` per line, `#` comments.
Command-line overrides win over file values. All randomness in an
experiment flows from the single config seed through named substreams, so
traces and checkpoints reproduce byte-for-byte.
"""

from __future__ import annotations

import zlib

import numpy as np


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str) -> dict[str, str]:
    with open(path) as fh:
        return parse_config_text(fh.read())


def apply_overrides(cfg: dict[str, str], overrides) -> dict[str, str]:
    out = dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def get_int(cfg: dict, key: str, default: int) -> int:
    return int(cfg[key]) if key in cfg else default


def get_float(cfg: dict, key: str, default: float) -> float:
    return float(cfg[key]) if key in cfg else default


def get_bool(cfg: dict, key: str, default: bool) -> bool:
    if key not in cfg:
        return default
    v = cfg[key].lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{key}: expected a boolean, got {cfg[key]!r}")


def get_str(cfg: dict, key: str, default: str) -> str:
    return cfg.get(key, default)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one purpose (data, init, augment, ...)."""
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])
