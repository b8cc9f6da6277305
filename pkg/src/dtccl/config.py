"""Pipeline configuration: one INI (or JSON) file with a section per module.

Nested dataclass fields are addressed with dotted keys, e.g.
``[augmentation] limits.micro_dp_xy = 0.3``. The ``[safety]`` section is the
single source for the dynamic limits, which are copied into the simulator and
the augmentation checker. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Optional

from .augment import AugmentationConfig
from .loop import LoopConfig, Stages
from .metrics import MetricsConfig
from .mining import MiningConfig
from .safety import SafetyConfig
from .sim import SimConfig
from .train import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    """Initialisation and nominal pretraining of the starting policy."""

    init_seed: int = 0
    pretrain_instances: int = 40
    pretrain_batch_size: int = 64
    pretrain_epochs: int = 30
    pretrain_learning_rate: float = 3e-3

    def __post_init__(self):
        if self.pretrain_instances < 1 or self.pretrain_batch_size < 1:
            raise ValueError("policy.pretrain_instances and policy.pretrain_batch_size must be >= 1")
        if self.pretrain_epochs < 0 or not self.pretrain_learning_rate >= 0:
            raise ValueError("policy.pretrain_epochs and policy.pretrain_learning_rate must be >= 0")

    def pretrain_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(batch_size=self.pretrain_batch_size, epochs=self.pretrain_epochs,
                           learning_rate=self.pretrain_learning_rate, seed=seed)


# fields owned by [safety] and injected, not read from their own sections
_INJECTED = {"sim": {"limits"}, "augmentation": {"safety"}}
SECTIONS = {
    "safety": SafetyConfig,
    "sim": SimConfig,
    "mining": MiningConfig,
    "augmentation": AugmentationConfig,
    "policy": PolicyConfig,
    "train": TrainConfig,
    "metrics": MetricsConfig,
    "loop": LoopConfig,
}

PRESETS = {
    "dtccl": {},
    "direct_il": {"train.w_cl": 0.0, "train.w_stab": 0.0,
                  "augmentation.enable_positives": False, "augmentation.enable_negatives": False},
    "augmented_il": {"train.w_cl": 0.0, "augmentation.enable_negatives": False},
}


@dataclass(frozen=True)
class GlobalConfig:
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        lim = self.safety.limits
        object.__setattr__(self, "sim", replace(self.sim, limits=lim))
        object.__setattr__(self, "augmentation", replace(self.augmentation, safety=self.safety))
        try:
            self.metrics.validate_against(lim)
        except ValueError as exc:
            raise ConfigError(f"metrics.comfort: {exc}") from exc

    def stages(self) -> Stages:
        return Stages(self.sim, self.mining, self.augmentation, self.train, self.metrics, self.loop)

    def with_seed(self, seed: int) -> "GlobalConfig":
        """Thread one root seed into every seeded module config."""
        return replace(self, sim=replace(self.sim, seed=seed), train=replace(self.train, seed=seed),
                       augmentation=replace(self.augmentation, rng_seed=seed))


# ---------------------------------------------------------------- flatten / build


def _flatten(obj, prefix="", skip=()) -> dict:
    out = {}
    for f in fields(obj):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        key = prefix + f.name
        if is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw, default, optional: bool, key: str):
    if isinstance(raw, str) and raw.strip().lower() in ("none", "null", "") and (optional or default is None):
        return None
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(f"not an integer: {raw!r}")
            return int(raw) if not isinstance(raw, str) else int(raw.strip())
        if isinstance(default, float) or default is None:
            return float(raw)
        if isinstance(default, tuple):
            items = raw if isinstance(raw, (list, tuple)) else [x.strip() for x in str(raw).split(",") if x.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(x) for x in items)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _build(cls, values: dict, section: str, skip=()):
    """Instantiate dataclass ``cls`` from dotted ``values``; unknown keys raise."""
    proto = cls()
    known = _flatten(proto, skip=skip)
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown key")
    hints = {f.name: str(f.type) for f in fields(cls)}

    def make(obj, prefix, hints):
        kw = {}
        for f in fields(obj):
            if f.name in skip and not prefix:
                continue
            key = prefix + f.name
            cur = getattr(obj, f.name)
            if is_dataclass(cur):
                sub = {k: v for k, v in values.items() if k.startswith(key + ".")}
                if sub:
                    kw[f.name] = make(cur, key + ".", {g.name: str(g.type) for g in fields(cur)})
            elif key in values:
                kw[f.name] = _coerce(values[key], cur, "Optional" in hints.get(f.name, ""),
                                     f"{section}.{key}")
        try:
            return replace(obj, **kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            msg = str(exc)
            if msg.startswith(section + "."):
                raise ConfigError(msg) from None
            raise ConfigError(f"{section}.{prefix.rstrip('.') or section}: {msg}") from None

    return make(proto, "", hints)


def from_dict(doc: dict) -> GlobalConfig:
    """Build from {section: {dotted key: value}}; values may be strings or native types."""
    doc = dict(doc)
    meta = doc.pop("meta", {}) or {}
    schema = int(meta.get("schema", SCHEMA_VERSION))
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"meta.schema: unsupported version {schema}")
    extra = set(meta) - {"schema"}
    if extra:
        raise ConfigError(f"meta.{sorted(extra)[0]}: unknown key")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section")
    kw = {}
    for name, cls in SECTIONS.items():
        values = _flat_section(doc.get(name) or {})
        kw[name] = _build(cls, values, name, _INJECTED.get(name, ()))
    try:
        return GlobalConfig(**kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _flat_section(d: dict, prefix="") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flat_section(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def to_dict(cfg: GlobalConfig) -> dict:
    doc = {"meta": {"schema": cfg.schema}}
    for name in SECTIONS:
        doc[name] = _flatten(getattr(cfg, name), skip=_INJECTED.get(name, ()))
    return doc


def dumps(cfg: GlobalConfig) -> str:
    """INI text that loads back to an equal config."""
    lines = []
    for section, values in to_dict(cfg).items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {_format(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


def loads(text: str, fmt: str = "ini") -> GlobalConfig:
    if fmt == "json":
        try:
            doc = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"parse error: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("parse error: top level must be an object")
        return from_dict(doc)
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"parse error: {exc}") from None
    return from_dict({s: dict(parser[s]) for s in parser.sections()})


def load_config(path, preset: Optional[str] = None) -> GlobalConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        text = fh.read()
    cfg = loads(text, "json" if str(path).endswith(".json") else "ini")
    return apply_preset(cfg, preset) if preset else cfg


def apply_preset(cfg: GlobalConfig, preset: str) -> GlobalConfig:
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown {preset!r} (choose from {sorted(PRESETS)})")
    doc = to_dict(cfg)
    for key, v in PRESETS[preset].items():
        section, k = key.split(".", 1)
        doc[section][k] = v
    return from_dict(doc)
