"""Run configuration: a JSON file with ``flow``, ``train`` and ``augment`` sections.

Parsing is strict (unknown keys are rejected by name) and ``dumps`` is canonical, so
a parsed file echoes back byte-identically.
"""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .audio import AugmentConfig
from .errors import ConfigError
from .flow import FlowConfig
from .trainer import TrainConfig

SECTIONS = {"flow": FlowConfig, "train": TrainConfig, "augment": AugmentConfig}


@dataclass
class RunConfig:
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    val_frac: float = 0.1
    test_frac: float = 0.1

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        top = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - top)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        kw = {}
        for name, value in data.items():
            if name in SECTIONS:
                kw[name] = _section(name, SECTIONS[name], value)
            else:
                kw[name] = value
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, pairs):
        """Apply ``section.key=value`` strings (values parsed as JSON, else kept as text)."""
        data = self.to_dict()
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            if not sep:
                raise ConfigError(f"override {pair!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            *path, leaf = key.split(".")
            node = data
            for part in path:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return RunConfig.from_dict(data)


def _section(name, cls, value):
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(value) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key {name + '.' + unknown[0]!r}")
    try:
        return cls(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from exc


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data)
