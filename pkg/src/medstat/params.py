"""Model configuration and the named parameter store."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .tokenizer import ENCODINGS, MODALITIES, TokenizerConfig

N_CLASSES = 3


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 6
    heads: int = 8
    d_ff: int = 0  # 0 -> 4 * d
    G: int = 2
    shuffle: bool = True
    eps: float = 1e-5

    def validate(self, d: int) -> None:
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.G < 1:
            raise ValueError("G must be >= 1")
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"d={d} is not divisible by heads={self.heads}")

    def ff_dim(self, d: int) -> int:
        return self.d_ff or 4 * d


@dataclass(frozen=True)
class ModelConfig:
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    encodings: tuple = ENCODINGS
    sequence_modeling: bool = True

    def __post_init__(self):
        self.encoder.validate(self.tokenizer.d)
        unknown = set(self.encodings) - set(ENCODINGS)
        if unknown:
            raise ValueError(f"unknown encodings {sorted(unknown)}")

    @property
    def d(self) -> int:
        return self.tokenizer.d

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


class ModelParams:
    """Ordered mapping of parameter name to float64 array, with a flat view."""

    def __init__(self, tensors=None):
        self.tensors = OrderedDict(tensors or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zeros_like(self) -> "ModelParams":
        return ModelParams((k, np.zeros_like(v)) for k, v in self.tensors.items())

    def copy(self) -> "ModelParams":
        return ModelParams((k, v.copy()) for k, v in self.tensors.items())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k, v in self.tensors.items():
            v[...] = vec[i:i + v.size].reshape(v.shape)
            i += v.size

    def locate(self, flat_index: int) -> tuple[str, tuple]:
        i = flat_index
        for k, v in self.tensors.items():
            if i < v.size:
                return k, np.unravel_index(i, v.shape)
            i -= v.size
        raise IndexError(flat_index)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.tensors)

    @classmethod
    def load(cls, path) -> "ModelParams":
        with np.load(path) as data:
            return cls((k, data[k].astype(np.float64)) for k in data.files)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) init; layer norms start at gain 1, bias 0."""
    tok, enc, d = config.tokenizer, config.encoder, config.d
    dff = enc.ff_dim(d)
    p = ModelParams()

    def affine(prefix, n_in, n_out):
        p[prefix + ".W"] = _uniform(rng, (n_in, n_out), n_in)
        p[prefix + ".b"] = _uniform(rng, (n_out,), n_in)

    for m in MODALITIES:
        affine(f"proj.{m.value}", tok.width(m), d)
    # lookup tables see a one-hot input: fan_in 1
    p["enc.positional"] = _uniform(rng, (tok.max_tokens, d), 1)
    p["enc.time"] = _uniform(rng, (24, d), 1)
    p["enc.modality"] = _uniform(rng, (len(MODALITIES), d), 1)
    p["enc.status"] = _uniform(rng, (N_CLASSES, d), 1)
    for layer in range(enc.layers):
        pre = f"layer{layer}."
        for name in ("q", "k", "v", "o"):
            affine(pre + name, d, d)
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        affine(pre + "ff1", d, dff)
        affine(pre + "ff2", dff, d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        if enc.G >= 2:
            affine(pre + "merge", enc.G * d, d)
    affine("head.hidden", d, d)
    affine("head.out", d, N_CLASSES)
    return p
