"""Flat ``key = value`` run configuration with dotted namespaces.

Example::

    # experiment.cfg
    tokenizer.d = 32
    tokenizer.segment.tapping = 128
    encoder.layers = 2
    train.learning_rate = 1e-3
    model.encodings = positional,time,modality,status
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Any

from .params import EncoderConfig, ModelConfig
from .records import Modality, PreprocessConfig
from .synthcorpus import SynthConfig
from .tokenizer import ENCODINGS, MODALITIES, TokenizerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_tuple(kind):
    def parse(text: str):
        text = text.strip()
        if not text or text == "none":
            return ()
        return tuple(kind(part.strip()) for part in text.split(","))
    return parse


def _parse_hours(text: str):
    # "9.5 14.5; 10 15" -> per-status peak tuples; "-" for no peak
    groups = []
    for part in text.split(";"):
        part = part.strip()
        groups.append(() if part in ("", "-") else tuple(float(x) for x in part.split()))
    return tuple(groups)


def _parse_encodings(text: str):
    encs = _parse_tuple(str)(text)
    bad = set(encs) - set(ENCODINGS)
    if bad:
        raise ValueError(f"unknown encodings {sorted(bad)}")
    return encs


_TYPES = {int: int, float: float, bool: _parse_bool, str: str}


def _field_parser(dc_field, default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            return _parse_hours
        return _parse_tuple(float)
    return _TYPES[type(default)]


@dataclass
class RunConfig:
    seed: int = 0
    folds: int = 5
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    encodings: tuple = ENCODINGS
    sequence_modeling: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.tokenizer, self.encoder, self.encodings, self.sequence_modeling)

    def to_items(self) -> dict:
        out = {"seed": self.seed, "folds": self.folds}
        tok = self.tokenizer
        out["tokenizer.d"] = tok.d
        for m in MODALITIES:
            out[f"tokenizer.segment.{m.value}"] = tok.segment[m]
            out[f"tokenizer.length.{m.value}"] = tok.lengths[m]
        for ns, obj in (("encoder", self.encoder), ("train", self.train),
                        ("synth", self.synth), ("preprocess", self.preprocess)):
            for f in fields(obj):
                out[f"{ns}.{f.name}"] = getattr(obj, f.name)
        out["model.encodings"] = self.encodings
        out["model.sequence_modeling"] = self.sequence_modeling
        return out

    def dumps(self) -> str:
        lines = []
        for key, value in self.to_items().items():
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(" ".join(repr(x) for x in g) or "-" for g in value)
        return ",".join(str(v) for v in value) or "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_lines(lines) -> dict:
    items = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def load_file(path) -> dict:
    with open(path) as fh:
        return parse_lines(fh)


def resolve(items: dict, base: RunConfig | None = None) -> RunConfig:
    """Apply string ``items`` on top of ``base``; every key is validated up front."""
    cfg = base or RunConfig()
    groups: dict = {"encoder": {}, "train": {}, "synth": {}, "preprocess": {}}
    seg = dict(cfg.tokenizer.segment)
    lengths = dict(cfg.tokenizer.lengths)
    d = cfg.tokenizer.d
    top = {}
    try:
        for key, text in items.items():
            ns, _, rest = key.partition(".")
            if key in ("seed", "folds"):
                top[key] = int(text)
            elif key == "tokenizer.d":
                d = int(text)
            elif ns == "tokenizer" and rest.split(".")[0] in ("segment", "length"):
                kind, _, mod = rest.partition(".")
                target = seg if kind == "segment" else lengths
                target[Modality(mod)] = int(text)
            elif key == "model.encodings":
                top["encodings"] = _parse_encodings(text)
            elif key == "model.sequence_modeling":
                top["sequence_modeling"] = _parse_bool(text)
            elif ns in groups:
                obj = getattr(cfg, ns)
                names = {f.name: f for f in fields(obj)}
                if rest not in names:
                    raise ConfigError(f"unknown config key {key!r}")
                groups[ns][rest] = _field_parser(names[rest], getattr(obj, rest))(text)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        new = replace(
            cfg,
            tokenizer=TokenizerConfig(d=d, segment=seg, lengths=lengths),
            encoder=replace(cfg.encoder, **groups["encoder"]),
            train=replace(cfg.train, **groups["train"]),
            synth=replace(cfg.synth, **groups["synth"]),
            preprocess=replace(cfg.preprocess, **groups["preprocess"]),
            **top,
        )
        new.model  # validates encoder/tokenizer compatibility
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if new.folds < 2:
        raise ConfigError("folds must be >= 2")
    if new.preprocess.sample_rate <= 2 * new.preprocess.cutoff:
        raise ConfigError("preprocess.sample_rate must exceed twice the cutoff")
    return new
