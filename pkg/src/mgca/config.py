"""Flat run configuration: defaults < JSON file < command-line overrides."""

from __future__ import annotations

import difflib
import json
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .objectives import LossConfig
from .sampler import SamplerConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # sampler
    alpha: float = 0.5
    batch_size: int = 16
    mono_mask_rate: float = 0.15
    bi_mask_rate: float = 0.25
    max_len_mono: int = 64
    max_len_bi: int = 64
    tlm_random_order: bool = False
    # model
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn: int = 256
    dropout: float = 0.1
    max_positions: int = 128
    # objectives
    temperature: float = 0.05
    enable_seq_ctl: bool = True
    enable_tok_ctl: bool = True
    ctl_on_clean_input: bool = False
    tok_average: str = "nonempty"
    mlm_weight: float = 1.0
    tlm_weight: float = 1.0
    seq_weight: float = 1.0
    tok_weight: float = 1.0
    # optimisation
    lr_peak: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    checkpoint_every: int = 100
    log_wallclock: bool = False
    seed: int = 0
    # data and outputs
    vocab_size: int = 600
    mono_dir: str = ""
    parallel_file: str = ""
    dictionary_file: str = ""
    vocab_file: str = ""
    heldout_file: str = ""
    checkpoint: str = ""
    output_dir: str = "runs/default"
    # command-specific
    stats_draws: int = 100000
    language_counts: list[int] = field(default_factory=list)
    mine_samples: int = 5
    ablation_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    ablation_steps: int = 2000

    def sampler_config(self) -> SamplerConfig:
        return _subset(SamplerConfig, self)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return _subset(ModelConfig, self, vocab_size=vocab_size)

    def loss_config(self) -> LossConfig:
        return _subset(LossConfig, self)

    def train_config(self) -> TrainConfig:
        return _subset(TrainConfig, self)

    def to_dict(self) -> dict:
        return asdict(self)


def _subset(cls, cfg: RunConfig, **extra):
    names = {f.name for f in fields(cls)}
    values = {k: v for k, v in asdict(cfg).items() if k in names}
    values.update(extra)
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


_FIELDS = {f.name: f for f in fields(RunConfig)}
_HINTS = typing.get_type_hints(RunConfig)


def valid_keys() -> list[str]:
    return sorted(_FIELDS)


def _unknown(key: str) -> ConfigError:
    close = difflib.get_close_matches(key, _FIELDS, n=1)
    hint = f" (did you mean '{close[0]}'?)" if close else ""
    return ConfigError(f"unknown config key '{key}'{hint}; valid keys: {', '.join(valid_keys())}")


def _check_type(key: str, value):
    hint = _HINTS[key]
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    else:
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool)
                                             for v in value)
    if not ok:
        raise ConfigError(f"config key '{key}' expects {getattr(hint, '__name__', hint)}, "
                          f"got {type(value).__name__} {value!r}")
    return value


def _parse_flag_value(key: str, text: str):
    hint = _HINTS[key]
    try:
        if hint is bool:
            lowered = text.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"config key '{key}' cannot parse {text!r} as "
                          f"{getattr(hint, '__name__', hint)}") from None


def parse_config(path: str | Path | None = None, overrides: dict[str, str] | None = None,
                 typed_overrides: dict | None = None) -> RunConfig:
    """Resolve a RunConfig. ``overrides`` hold raw ``--set`` strings;
    ``typed_overrides`` already-typed values (``--seed``, ``--out``)."""
    values: dict = {}
    if path:
        text = Path(path).read_text(encoding="utf-8").strip()
        data = json.loads(text) if text else {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a flat JSON object")
        for key, value in data.items():
            if key not in _FIELDS:
                raise _unknown(key)
            values[key] = _check_type(key, value)
    for key, text in (overrides or {}).items():
        if key not in _FIELDS:
            raise _unknown(key)
        values[key] = _parse_flag_value(key, text)
    for key, value in (typed_overrides or {}).items():
        if value is not None:
            values[key] = _check_type(key, value)
    return RunConfig(**values)


def validate_dict(data: dict) -> RunConfig:
    """Re-check an echoed config: every key known, every value well-typed."""
    for key, value in data.items():
        if key not in _FIELDS:
            raise _unknown(key)
        _check_type(key, value)
    missing = set(_FIELDS) - set(data)
    if missing:
        raise ConfigError(f"missing keys: {sorted(missing)}")
    return RunConfig(**data)


def echo_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
