"""Plain-text key=value run configuration with typed defaults.

A config file may set any known key; command-line overrides (key=value) win
over the file. Unknown keys are hard errors, never silently ignored. The
resolved configuration is written back into every run directory so any run
can be replayed from its artifacts alone.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(Exception):
    pass


# model + training knobs for the train/ablate commands, in file order
TRAIN_DEFAULTS: dict = {
    "image_size": 32,
    "patch": 4,
    "dim": 128,
    "depth": 6,
    "heads": 4,
    "mlp_ratio": 4,
    "time_dim": 64,
    "domain_dim": 64,
    "cond_dim": 128,
    "text_len": 8,
    "n_captions": 16,
    "n_views": 4,
    "lora_rank": 16,
    "lora_alpha": 16.0,
    "shared_pe": True,
    "text_agnostic": True,
    "domain_lora": True,
    "pointmap": True,
    "model_seed": 0,
    "steps": 8000,
    "batch_size": 8,
    "lr": 1e-3,
    "lr_schedule": "constant",
    "dropout_p": 0.1,
    "base_freeze_step": -1,
    "rgb_weight": 1.0,
    "pm_weight": 1.0,
    "checkpoint_every": 1000,
    "debug_checks": False,
    "seed": 0,
}


def _parse_typed(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as "
                          f"{type(default).__name__}") from e


def load_config(path=None, overrides: list[str] | None = None,
                defaults: dict | None = None) -> dict:
    cfg = dict(defaults if defaults is not None else TRAIN_DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(p.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in cfg:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = _parse_typed(key, value, cfg[key])
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in cfg:
            raise ConfigError(f"override references unknown config key {key!r}")
        cfg[key] = _parse_typed(key, value, cfg[key])
    return cfg


def write_config(cfg: dict, path):
    lines = [f"{k}={str(v).lower() if isinstance(v, bool) else v}" for k, v in cfg.items()]
    Path(path).write_text("\n".join(lines) + "\n")
