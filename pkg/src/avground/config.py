"""Run configuration: an INI file with one section per stage.

Example::

    [corpus]
    n_pairs = 2000
    seed = 0

    [model]
    kind = resdavenet
    preset = mini

    [training]
    epochs = 20
    lr = 0.01

    [probe]
    hidden = 0

    [distill]
    layers = L1,L2,L3,L4

Keys not listed keep their defaults; unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .models import (MINI_DAVENET, MINI_RESDAVENET, PAPER_RESDAVENET, DAVEnetAudioConfig, ImageEncoderConfig,
                     construct_model)
from .probe import ProbeConfig
from .synth import CorpusConfig
from .training import TrainingConfig


@dataclass
class ModelConfig:
    kind: str = "resdavenet"
    preset: str = "mini"
    image_mode: str = "presence"

    def audio_config(self):
        if self.kind == "resdavenet":
            presets = {"mini": MINI_RESDAVENET, "paper": PAPER_RESDAVENET}
        elif self.kind == "davenet":
            presets = {"mini": MINI_DAVENET, "paper": DAVEnetAudioConfig()}
        else:
            raise ConfigError("model.kind", f"unknown model kind {self.kind!r}")
        if self.preset not in presets:
            raise ConfigError("model.preset", f"unknown preset {self.preset!r}; expected mini or paper")
        return presets[self.preset]

    def build(self, seed: int, vocab_size: int, image_size: int):
        audio = self.audio_config()
        image = ImageEncoderConfig(mode=self.image_mode, output_dim=audio.embedding_dim, vocab_size=vocab_size,
                                   image_size=image_size)
        return construct_model(self.kind, audio, image, seed=seed)


@dataclass
class DistillSection:
    layers: tuple[str, ...] = ("L1", "L2", "L3", "L4")


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    distill: DistillSection = field(default_factory=DistillSection)

    def validate(self) -> None:
        self.corpus.validate()
        self.training.validate()
        self.model.audio_config()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Inverse of :meth:`to_dict` (also accepts the JSON snapshot in a run manifest)."""
        return parse_config(_ini_text(d))

    def to_ini(self) -> str:
        return _ini_text(self.to_dict())


def _ini_text(d: dict) -> str:
    lines = []
    for section, values in d.items():
        if isinstance(values, dict):
            lines.append(f"[{section}]")
            lines += [f"{key} = {_format(value)}" for key, value in values.items()]
            lines.append("")
    return "\n".join(lines)


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(section: str, key: str, raw: str, hint):
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            inner = typing.get_args(hint)[0]
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(inner(s) for s in items)
        if hint is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return hint(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}", f"cannot parse {raw!r}: {exc}") from None


def _fill(obj, section: str, items: dict[str, str]):
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"{section}.{key}", "unknown key")
        updates[key] = _parse(section, key, raw, hints[key])
    return dataclasses.replace(obj, **updates)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("file", f"{source}: {exc}") from None
    cfg = RunConfig()
    sections = {f.name for f in dataclasses.fields(cfg)}
    for section in parser.sections():
        if section not in sections:
            raise ConfigError(section, f"unknown section; expected one of {sorted(sections)}")
        setattr(cfg, section, _fill(getattr(cfg, section), section, dict(parser[section])))
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("file", f"config file {path} not found")
    return parse_config(path.read_text(), str(path))
