"""Run configuration: INI-style files, CLI overrides, presets, the geometry
hash that guards checkpoints, and run-manifest emission.

Unknown sections or keys are hard errors; every field has a documented
default (the desk preset). A run manifest is itself a valid config file, so
any run can be reproduced from its manifest plus the seed recorded in it.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentConfig
from .errors import ConfigError
from .vit import ViTConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    threads: int = 0  # 0 = leave library thread pools alone


@dataclass(frozen=True)
class MemoryCfg:
    capacity: int = 512
    block_size: int = 128
    fixed_partition: bool = False

    def __post_init__(self):
        if self.capacity < 1 or self.block_size < 1:
            raise ConfigError(
                f"memory capacity and block_size must be positive, got "
                f"{self.capacity}, {self.block_size}"
            )
        if self.capacity % self.block_size:
            raise ConfigError(
                f"memory block_size {self.block_size} must divide capacity {self.capacity}"
            )


@dataclass(frozen=True)
class ScheduleCfg:
    lr_start: float = 5e-4
    lr_end: float = 1e-5
    wd_start: float = 0.04
    wd_end: float = 0.4
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.07
    tau_t_ramp_epochs: int = 6
    ema_start: float = 0.996
    ema_end: float = 1.0

    def __post_init__(self):
        if self.tau_s <= 0 or self.tau_t_start <= 0 or self.tau_t_end <= 0:
            raise ConfigError("temperatures must be positive")


@dataclass(frozen=True)
class PretrainCfg:
    batch_size: int = 16
    epochs: int = 12
    checkpoint_every: int = 4
    teacher_uses_locals: bool = False


@dataclass(frozen=True)
class FinetuneCfg:
    batch_size: int = 16
    epochs: int = 8
    warmup_epochs: int = 2
    lr_peak: float = 1e-3
    lr_end: float = 1e-5
    label_smoothing: float = 0.1
    freeze_encoder: bool = False
    bootstrap_resamples: int = 1000
    alpha: float = 0.05

    def __post_init__(self):
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.warmup_epochs > self.epochs:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}"
            )


@dataclass(frozen=True)
class AblateCfg:
    fractions: tuple[float, ...] = (0.1, 0.3, 0.5, 1.0)

    def __post_init__(self):
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError(f"fractions must lie in (0, 1], got {self.fractions}")


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    encoder: ViTConfig = field(default_factory=lambda: DESK_ENCODER)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    memory: MemoryCfg = field(default_factory=MemoryCfg)
    schedule: ScheduleCfg = field(default_factory=ScheduleCfg)
    pretrain: PretrainCfg = field(default_factory=PretrainCfg)
    finetune: FinetuneCfg = field(default_factory=FinetuneCfg)
    ablate: AblateCfg = field(default_factory=AblateCfg)


DESK_ENCODER = ViTConfig(
    patch_size=8,
    embed_dim=64,
    depth=4,
    heads=4,
    mlp_ratio=4,
    global_view_px=64,
    local_view_px=32,
    proj_hidden_dim=128,
    proj_out_dim=32,
)

# full-scale constants: ViT-B geometry, batch 1024, lr 1e-5 -> 1e-6,
# wd 0.04 -> 0.4, tau_t ramp over 30 epochs, memory 65536 with 16384 blocks
PAPER_OVERRIDES = {
    "encoder.patch_size": "16",
    "encoder.embed_dim": "768",
    "encoder.depth": "12",
    "encoder.heads": "12",
    "encoder.global_view_px": "224",
    "encoder.local_view_px": "96",
    "encoder.proj_hidden_dim": "2048",
    "encoder.proj_out_dim": "256",
    "memory.capacity": "65536",
    "memory.block_size": "16384",
    "schedule.lr_start": "1e-5",
    "schedule.lr_end": "1e-6",
    "schedule.tau_t_ramp_epochs": "30",
    "pretrain.batch_size": "1024",
    "pretrain.epochs": "100",
    "pretrain.checkpoint_every": "10",
    "finetune.batch_size": "16",
    "finetune.epochs": "50",
    "finetune.warmup_epochs": "10",
    "finetune.lr_peak": "5e-4",
    "finetune.lr_end": "1e-6",
}

PRESETS = {"desk": {}, "paper": PAPER_OVERRIDES}

_SECTIONS: dict[str, type] = {
    "run": RunSection,
    "encoder": ViTConfig,
    "augment": AugmentConfig,
    "memory": MemoryCfg,
    "schedule": ScheduleCfg,
    "pretrain": PretrainCfg,
    "finetune": FinetuneCfg,
    "ablate": AblateCfg,
}


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    origin = typing.get_origin(target_type)
    if origin is tuple:
        args = typing.get_args(target_type)
        elem = args[0]
        parts = [p for p in (s.strip() for s in raw.split(",")) if p]
        return tuple(_coerce(p, elem, key) for p in parts)
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {target_type.__name__}, got {raw!r}") from None
    if target_type is str:
        return raw
    raise ConfigError(f"{key}: unsupported option type {target_type}")


def _apply(values: dict[str, dict[str, str]]) -> RunConfig:
    built = {}
    for section, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for key, raw in values.get(section, {}).items():
            if key not in hints:
                raise ConfigError(f"unknown config key [{section}] {key}")
            kwargs[key] = _coerce(raw, hints[key], f"{section}.{key}")
        try:
            built[section] = cls(**{**_defaults(cls), **kwargs})
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    return RunConfig(**built)


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


def _parse_override_key(dotted: str) -> tuple[str, str]:
    if "." not in dotted:
        raise ConfigError(f"override key must look like section.key, got {dotted!r}")
    section, key = dotted.split(".", 1)
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    return section, key


def parse_config(
    path: str | Path | None = None,
    overrides: dict[str, str] | None = None,
    preset: str = "desk",
) -> RunConfig:
    """Layered resolution: preset defaults, then the config file, then CLI
    overrides (--section.key value)."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values: dict[str, dict[str, str]] = {}

    def put(dotted: str, raw: str):
        section, key = _parse_override_key(dotted)
        values.setdefault(section, {})[key] = raw

    for dotted, raw in PRESETS[preset].items():
        put(dotted, raw)

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case
        try:
            parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            if section == "provenance":
                continue  # emitted into run manifests, ignored on re-parse
            if section not in _SECTIONS:
                raise ConfigError(f"{path}: unknown config section [{section}]")
            for key, raw in parser.items(section):
                put(f"{section}.{key}", raw)

    for dotted, raw in (overrides or {}).items():
        put(dotted, raw)

    return _apply(values)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_text(config: RunConfig, provenance: dict[str, str] | None = None) -> str:
    """Canonical INI dump (sorted keys); stable input for hashing and for the
    run manifest."""
    out = io.StringIO()
    for section, cls in _SECTIONS.items():
        obj = getattr(config, section)
        out.write(f"[{section}]\n")
        for name in sorted(f.name for f in dataclasses.fields(cls)):
            out.write(f"{name} = {_format_value(getattr(obj, name))}\n")
        out.write("\n")
    if provenance:
        out.write("[provenance]\n")
        for key in sorted(provenance):
            out.write(f"{key} = {provenance[key]}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(config: RunConfig) -> bytes:
    """32-byte digest of the geometry that a checkpoint depends on (encoder
    and memory sections). Schedules/epochs may differ between runs that share
    checkpoints, so they are not part of the hash."""
    text_parts = []
    for section in ("encoder", "memory"):
        obj = getattr(config, section)
        for f in sorted(dataclasses.fields(obj), key=lambda f: f.name):
            text_parts.append(f"{section}.{f.name}={_format_value(getattr(obj, f.name))}")
    return hashlib.sha256("\n".join(text_parts).encode("utf-8")).digest()


def write_run_manifest(config: RunConfig, out_dir: str | Path, extra: dict[str, str]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = {"config_hash": config_hash(config).hex(), "config_version": str(CONFIG_VERSION)}
    provenance.update(extra)
    path = out_dir / "run_manifest.ini"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(config_text(config, provenance), encoding="utf-8")
    tmp.replace(path)
    return path
