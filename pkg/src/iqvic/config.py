"""Run configuration: INI sections with defaults, file overrides, flag overrides."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .transformer import ConfigError

# Published training values are the defaults; desk-scale runs override them from a file.
DEFAULTS: dict[str, dict[str, Any]] = {
    "model": {
        "d_model": 64,
        "n_heads": 4,
        "n_layers": 2,
        "d_ff": 256,
        "vocab_size": 128,
        "max_positions": 0,  # 0: sized from the longest assembled input
        "lora_rank": 4,
        "lora_alpha": 16.0,
        "lora_dropout": 0.05,
    },
    "pipeline": {
        "method": "iqvic",
        "context_tokens": 64,
        "memory_capacity": 10,
        "grid": 4,
        "feature_dim": 32,
        "memory_order": "question_first",
    },
    "train": {
        "batch_size": 4,
        "grad_accum_steps": 4,
        "learning_rate": 2e-4,
        "weight_decay": 0.0,
        "lr_schedule": "constant",
        "step1_epochs": 1,
        "step2_epochs": 1,
        "checkpoint_every": 0,
    },
    "data": {
        "n_keys": 16,
        "n_values": 16,
        "n_fill": 16,
        "n_frames": 8,
        "step1_train": 2000,
        "step2_train": 2000,
        "eval": 500,
    },
    "bench": {
        "methods": "iqvic,avgpool,truncate",
        "max_new": 16,
        "workers": 1,
        "min_margin": 10.0,
        "noise_slack": 2.0,
        "t_sweep": "",
    },
    "run": {
        "seed": 0,
    },
}


@dataclass
class RunConfig:
    sections: dict[str, dict[str, Any]] = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULTS.items()})

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.sections[section]

    @property
    def seed(self) -> int:
        return int(self.sections["run"]["seed"])

    def set(self, section: str, key: str, raw) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        self.sections[section][key] = _coerce(DEFAULTS[section][key], raw, f"{section}.{key}")

    def update_from_file(self, path: str | Path) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                self.set(section, key, raw)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section in DEFAULTS:
            parser[section] = {k: _fmt(v) for k, v in self.sections[section].items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def write(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_ini())


def _coerce(default, raw, where: str):
    if not isinstance(raw, str):
        return type(default)(raw)
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw.strip()


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def packaged_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``desk``."""
    return Path(__file__).parent / "configs" / f"{name}.ini"


def load_config(path: str | Path | None = None, overrides: dict[tuple[str, str], Any] | None = None) -> RunConfig:
    """Defaults, then ``path`` (a file, or the name of a packaged profile), then ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        if not Path(path).exists() and packaged_config(str(path)).exists():
            path = packaged_config(str(path))
        cfg.update_from_file(path)
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            cfg.set(section, key, value)
    return cfg
