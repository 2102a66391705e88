"""Layered run configuration: defaults, then a JSON profile, then CLI flags.

A profile file holds up to four sections (model, train, rollout, loss) whose
keys mirror the corresponding dataclass fields. Unknown sections or keys are
rejected by name so typos surface instead of silently reverting to defaults.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .model import ModelConfig
from .rollout import RolloutConfig
from .training import LossWeights, TrainConfig


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "rollout": RolloutConfig,
    "loss": LossWeights,
}

# fields that are not plain JSON values and stay out of profile files
_EXCLUDED = {"rollout": {"extents"}}


def _allowed_keys(section: str) -> set[str]:
    cls = _SECTIONS[section]
    names = {f.name for f in dataclasses.fields(cls)}
    return names - _EXCLUDED.get(section, set())


def load_config_file(path) -> dict:
    """Parse and shape-check a profile; values are validated on construction."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown config section '{section}'")
        if not isinstance(body, dict):
            raise ConfigError(f"{path}: section '{section}' must be an object")
        for key in body:
            if key not in _allowed_keys(section):
                raise ConfigError(f"{path}: unknown config key '{section}.{key}'")
    return raw


def merge_layers(*layers: dict | None) -> dict:
    """Later layers win, per key within each section."""
    merged: dict[str, dict] = {}
    for layer in layers:
        if not layer:
            continue
        for section, body in layer.items():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section '{section}'")
            slot = merged.setdefault(section, {})
            for key, value in body.items():
                if key not in _allowed_keys(section):
                    raise ConfigError(f"unknown config key '{section}.{key}'")
                slot[key] = value
    return merged


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    rollout: RolloutConfig
    loss: LossWeights

    def to_dict(self) -> dict:
        out = {}
        for section in _SECTIONS:
            obj = getattr(self, section)
            body = {}
            for f in dataclasses.fields(obj):
                if f.name in _EXCLUDED.get(section, set()):
                    continue
                body[f.name] = getattr(obj, f.name)
            out[section] = body
        return out


def build_run_config(*layers: dict | None) -> RunConfig:
    merged = merge_layers(*layers)
    try:
        return RunConfig(
            model=ModelConfig(**merged.get("model", {})),
            train=TrainConfig(**merged.get("train", {})),
            rollout=RolloutConfig(**merged.get("rollout", {})),
            loss=LossWeights(**merged.get("loss", {})),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad config value: {e}") from e
