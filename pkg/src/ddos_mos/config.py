"""Pipeline configuration and its flat ``key = value`` text format.

Keys are dotted ``section.field`` names, for example::

    seed = 3
    sim.n_systems = 40
    train.total_steps = 2000
    flags.no_dapt = true
    augment.specs = speed:0.9, speed:1.1, tempo:0.9, tempo:1.1, pitch:-1, pitch:1

Sections: ``sim`` (source simulator), ``target`` (shifted-domain corpus),
``dapt``, ``train``, ``transfer``, ``flags`` (ablations) and ``augment``.
A top-level ``seed`` overrides the seed of every section.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace

from .augment import DEFAULT_SPECS, AugmentSpec
from .dapt import DaptConfig
from .model import TrainConfig
from .simulator import SimulatorConfig

TRANSFER_MODES = ("zero_shot", "few_shot", "full")
FLAG_NAMES = ("no_dapt", "no_aug", "no_dist_head", "no_reg_head", "linear_heads", "no_refine")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TargetConfig:
    """Shifted-domain corpus standing in for the transfer dataset."""

    profile_id: int = 1
    n_systems: int = 24
    utts_per_system: int = 16
    split: tuple = (0.1675, 0.1675, 0.665)
    unlabeled_utts_per_system: int = 11


@dataclass(frozen=True)
class TransferConfig:
    mode: str = "zero_shot"
    few_shot_n: int = 10
    epochs: int = 50
    batch_size: int = 16
    lr: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.mode not in TRANSFER_MODES:
            raise ConfigError(f"transfer mode must be one of {TRANSFER_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class Flags:
    no_dapt: bool = False
    no_aug: bool = False
    no_dist_head: bool = False
    no_reg_head: bool = False
    linear_heads: bool = False
    no_refine: bool = False

    def __post_init__(self):
        if self.no_dist_head and self.no_reg_head:
            raise ConfigError("cannot disable both prediction heads")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    split: tuple = (0.7, 0.15, 0.15)
    sim: SimulatorConfig = field(default_factory=SimulatorConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    dapt: DaptConfig = field(default_factory=DaptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    flags: Flags = field(default_factory=Flags)
    augment: tuple = DEFAULT_SPECS

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, seed=seed, sim=replace(self.sim, seed=seed),
                       dapt=replace(self.dapt, seed=seed), train=replace(self.train, seed=seed),
                       transfer=replace(self.transfer, seed=seed))

    def with_flags(self, **flags) -> "PipelineConfig":
        return replace(self, flags=replace(self.flags, **flags))

    def snapshot(self) -> dict:
        return to_flat(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.snapshot(), sort_keys=True).encode()).hexdigest()


SECTIONS = {"sim": SimulatorConfig, "target": TargetConfig, "dapt": DaptConfig,
            "train": TrainConfig, "transfer": TransferConfig, "flags": Flags}


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(current, text: str):
    if isinstance(current, bool):
        return _parse_bool(text)
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        kinds = [type(v) for v in current] or [float]
        return tuple(kinds[min(i, len(kinds) - 1)](p) for i, p in enumerate(parts))
    return text


def parse_specs(text: str):
    specs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        kind, _, mag = item.partition(":")
        if not mag:
            raise ConfigError(f"augment spec must look like kind:magnitude, got {item!r}")
        specs.append(AugmentSpec(kind.strip(), float(mag)))
    return tuple(specs)


def format_specs(specs) -> str:
    return ", ".join(f"{s.kind}:{s.magnitude:g}" for s in specs)


def apply_overrides(cfg: PipelineConfig, values: dict) -> PipelineConfig:
    """Apply dotted-key string overrides, validating every key."""
    top = {}
    sections = {name: {} for name in SECTIONS}
    seed = None
    for key, text in values.items():
        if key == "seed":
            seed = int(text)
        elif key == "split":
            top["split"] = _coerce(cfg.split, text)
        elif key == "augment.specs":
            top["augment"] = parse_specs(text)
        elif "." in key and key.split(".", 1)[0] in SECTIONS:
            section, name = key.split(".", 1)
            current = getattr(cfg, section)
            if name not in {f.name for f in fields(current)}:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                sections[section][name] = _coerce(getattr(current, name), text)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        new = replace(cfg, **top, **{s: replace(getattr(cfg, s), **kv) for s, kv in sections.items() if kv})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if seed is not None:
        new = new.with_seed(seed)
    return new


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    values.update(overrides or {})
    return apply_overrides(cfg, values)


def to_flat(cfg: PipelineConfig) -> dict:
    out = {"seed": str(cfg.seed), "split": ", ".join(repr(v) for v in cfg.split)}
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out[f"{section}.{f.name}"] = str(v)
    out["augment.specs"] = format_specs(cfg.augment)
    return out


def write_config(path, cfg: PipelineConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in to_flat(cfg).items():
            fh.write(f"{k} = {v}\n")


def as_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: as_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [as_jsonable(v) for v in obj]
    return obj
