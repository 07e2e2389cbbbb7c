"""Run configuration: one JSON document binding every module's settings.

A run is reproducible from its archived config alone (plus the data); every
CLI command writes the resolved config next to its outputs. Values can be
overridden from the command line with dotted paths, e.g.
`--set train.epochs=20 --set perturbation.p_fake_mvo=0`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .augment import AugmentConfig
from .data import ClassScheme
from .errors import ConfigError
from .networks import NetworkSpec2D, NetworkSpec3D
from .perturb import PerturbationConfig
from .preprocess import PreprocessConfig
from .synthgen import IntensityModel, PhantomConfig
from .training import TrainConfig


def _tuplify(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build(cls, d: dict):
    try:
        return cls(**{k: _tuplify(v) for k, v in d.items()})
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__} section: {exc}") from exc


@dataclass
class RunConfig:
    profile: str = "emidec"            # emidec | myops | custom
    manifest: Optional[str] = None
    output_dir: str = "runs"
    seed: int = 12345
    folds: int = 5
    vanilla_cascade: bool = False
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig.emidec)
    augment_standard: AugmentConfig = field(default_factory=AugmentConfig.standard)
    augment_elevated: AugmentConfig = field(default_factory=AugmentConfig.elevated)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig.emidec)
    network_2d: NetworkSpec2D = field(default_factory=NetworkSpec2D.emidec)
    network_3d: NetworkSpec3D = field(default_factory=NetworkSpec3D.emidec)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantoms: PhantomConfig = field(default_factory=PhantomConfig)

    @property
    def scheme(self) -> ClassScheme:
        if self.profile == "myops":
            return ClassScheme.myops()
        return ClassScheme.emidec()

    @classmethod
    def for_profile(cls, profile: str) -> "RunConfig":
        if profile == "emidec" or profile == "custom":
            return cls(profile=profile)
        if profile == "myops":
            return cls(
                profile="myops",
                preprocess=PreprocessConfig.myops(),
                perturbation=PerturbationConfig.myops(),
                network_2d=NetworkSpec2D.myops(),
                network_3d=NetworkSpec3D.myops(),
            )
        raise ConfigError(f"unknown dataset profile {profile!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        sections = {
            "preprocess": PreprocessConfig,
            "augment_standard": AugmentConfig,
            "augment_elevated": AugmentConfig,
            "perturbation": PerturbationConfig,
            "network_2d": NetworkSpec2D,
            "network_3d": NetworkSpec3D,
            "train": TrainConfig,
            "phantoms": PhantomConfig,
        }
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                if key == "phantoms" and isinstance(value.get("intensity"), dict):
                    value = dict(value)
                    value["intensity"] = _build(IntensityModel, value["intensity"])
                kwargs[key] = _build(sections[key], value)
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        """Apply `a.b.c=value` overrides; values parse as JSON, else strings."""
        doc = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form path=value")
            dotted, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = doc
            parts = dotted.split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config section {dotted!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config field {dotted!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(doc)

    def reseed(self, seed: int) -> "RunConfig":
        """Propagate one seed into every seeded module config."""
        cfg = RunConfig.from_dict(self.to_dict())
        cfg.seed = seed
        cfg.train.seed = seed
        cfg.phantoms.seed = seed
        return cfg
