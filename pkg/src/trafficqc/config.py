"""Run configuration: one JSON document per experiment directory."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .classifier import ClassifierHyper, Variant
from .cwt import PREFACTORS
from .datagen import ConfigError, DatasetConfig
from .vae import VaeHyper


@dataclass
class CwtOptions:
    prefactor: str = "inverse"
    dt: float = 1.0


@dataclass
class ClassifierOptions(ClassifierHyper):
    variant: str = "pns"


@dataclass
class Seeds:
    split: int = 0
    vae: int = 0
    classifier: int = 0


@dataclass
class RunConfig:
    output_dir: str = "run"
    data: DatasetConfig = field(default_factory=DatasetConfig)
    cwt: CwtOptions = field(default_factory=CwtOptions)
    vae: VaeHyper = field(default_factory=VaeHyper)
    classifier: ClassifierOptions = field(default_factory=ClassifierOptions)
    seeds: Seeds = field(default_factory=Seeds)

    def validate(self):
        self.data.validate()
        if self.cwt.prefactor not in PREFACTORS:
            raise ConfigError(f"cwt.prefactor must be one of {PREFACTORS}, got {self.cwt.prefactor!r}")
        if self.cwt.dt <= 0:
            raise ConfigError("cwt.dt must be positive")
        try:
            self.vae.validate()
            Variant(self.classifier.variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.classifier.lr <= 0 or self.classifier.epochs < 1 or self.classifier.batch_size < 1:
            raise ConfigError("classifier lr, epochs and batch_size must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_SECTIONS = {"data": DatasetConfig, "cwt": CwtOptions, "vae": VaeHyper, "classifier": ClassifierOptions,
             "seeds": Seeds}
_TUPLE_FIELDS = {"fault_mix", "block_lengths"}


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS else v for k, v in values.items()}
    return cls(**kwargs)


def config_from_dict(d: dict) -> RunConfig:
    unknown = sorted(set(d) - set(_SECTIONS) - {"output_dir"})
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    cfg = RunConfig(output_dir=d.get("output_dir", "run"),
                    **{name: _build(cls, d.get(name, {}), name) for name, cls in _SECTIONS.items()})
    return cfg.validate()


def load_config(path: str | Path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(d)
