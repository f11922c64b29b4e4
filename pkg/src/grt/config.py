"""INI-style run configuration (``key = value`` lines under ``[section]`` headers).

Values are parsed as JSON when possible; otherwise comma-separated lists and
bare words are accepted (``scale_range = 0.9, 1.1``, ``lovasz = true``).
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from grt.backbone import GRTConfig
from grt.data import SyntheticSceneConfig
from grt.metrics import CLASS_NAMES
from grt.training import AugmentConfig, LossConfig, OptimConfig


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class RunSettings:
    seed: int = 0
    threads: int = 1
    eval_every: int = 1
    out_dir: str = "runs/default"


@dataclass
class DataSettings:
    train: str = ""
    val: str = ""
    val_scenes: int = 0


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    data: DataSettings = field(default_factory=DataSettings)
    model: GRTConfig = field(default_factory=GRTConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    synth: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)

    def to_dict(self) -> dict:
        return {
            "run": asdict(self.run),
            "data": asdict(self.data),
            "model": self.model.to_dict(),
            "optim": asdict(self.optim),
            "loss": {"class_weights": list(self.loss.class_weights), "lovasz": self.loss.lovasz},
            "augment": {**asdict(self.augment), "scale_range": list(self.augment.scale_range)},
            "synth": self.synth.to_dict(),
        }

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {json.dumps(v)}" for k, v in values.items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {f.name for f in fields(cls)}
        unknown = set(d) - sections
        if unknown:
            raise ConfigError(f"unknown section(s): {sorted(unknown)}")
        builders = {
            "run": lambda v: _dataclass(RunSettings, v, "run"),
            "data": lambda v: _dataclass(DataSettings, v, "data"),
            "model": lambda v: GRTConfig.from_dict(v),
            "optim": OptimConfig.from_dict,
            "loss": LossConfig.from_dict,
            "augment": AugmentConfig.from_dict,
            "synth": lambda v: SyntheticSceneConfig.from_dict(_class_keys(v)),
        }
        kwargs = {}
        for name, values in d.items():
            try:
                kwargs[name] = builders[name](values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}] {exc}") from None
        return cls(**kwargs)


def _dataclass(cls, values, section):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {sorted(unknown)}")
    return cls(**values)


def _class_keys(values: dict) -> dict:
    out = dict(values)
    for key, v in values.items():
        if isinstance(v, dict):
            out[key] = {(CLASS_NAMES.index(k) if k in CLASS_NAMES else int(k)): tuple(r)
                        for k, r in v.items()}
    return out


def parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in raw:
        return [parse_value(p) for p in raw.split(",")]
    return raw


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    d = {s: {k: parse_value(v) for k, v in parser.items(s)} for s in parser.sections()}
    return RunConfig.from_dict(d)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)
