"""Segment chunking, linear projection and additive attribute encodings."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from .records import Modality

MODALITIES = (Modality.TAPPING, Modality.WALKING, Modality.MEMORY)
ENCODINGS = ("positional", "time", "modality", "status")


@dataclass(frozen=True)
class TokenizerConfig:
    d: int = 64
    segment: dict = field(default_factory=lambda: {
        Modality.TAPPING: 32, Modality.WALKING: 32, Modality.MEMORY: 8})
    lengths: dict = field(default_factory=lambda: {m: m.max_length for m in MODALITIES})

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        for m in MODALITIES:
            if self.lengths[m] % self.segment[m]:
                raise ValueError(
                    f"segment length {self.segment[m]} does not divide {self.lengths[m]} for {m.value}")

    def tokens_per_source(self, m: Modality) -> int:
        return self.lengths[m] // self.segment[m]

    def width(self, m: Modality) -> int:
        return self.segment[m] * m.channels

    @property
    def max_tokens(self) -> int:
        return max(self.tokens_per_source(m) for m in MODALITIES)


def chunk(series: np.ndarray, S: int) -> np.ndarray:
    """(L, C) -> (L/S, S*C); each row holds S consecutive samples, channels interleaved."""
    L, C = series.shape
    if S < 1 or L % S:
        raise ValueError(f"segment length {S} does not divide series length {L}")
    return np.ascontiguousarray(series).reshape(L // S, S * C)


def project(segments: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if segments.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(
            f"shape mismatch: segments {segments.shape}, W {W.shape}, b {b.shape}")
    return segments @ W + b


def encode_attributes(tokens, positions, hour, modality, status, tables, enabled=ENCODINGS):
    """Add the positional, hour, modality and (history only) status rows to ``tokens``.

    ``tables`` maps ``positional``/``time``/``modality``/``status`` to arrays;
    ``status`` is None for the query record.
    """
    positions = np.asarray(positions)
    _check_index(positions, tables["positional"].shape[0], "position")
    _check_index(hour, 24, "hour")
    _check_index(modality, tables["modality"].shape[0], "modality")
    out = tokens.copy()
    if "positional" in enabled:
        out += tables["positional"][positions]
    if "time" in enabled:
        out += tables["time"][hour]
    if "modality" in enabled:
        out += tables["modality"][modality]
    if status is not None:
        _check_index(status, tables["status"].shape[0], "status")
        if "status" in enabled:
            out += tables["status"][status]
    return out


def _check_index(idx, bound, what):
    arr = np.asarray(idx)
    if arr.size and (arr.min() < 0 or arr.max() >= bound):
        raise IndexError(f"{what} index out of range [0, {bound})")


def hour_of(timestamp: float) -> int:
    return datetime.fromtimestamp(int(timestamp), tz=timezone.utc).hour


@dataclass
class Source:
    """One (record, modality) pair of a sample, ready for projection."""

    record: int
    modality: Modality
    segments: np.ndarray
    hour: int
    status: Optional[int]

    @property
    def n_tokens(self) -> int:
        return self.segments.shape[0]


@dataclass
class SampleInput:
    sources: list
    label: int
    meta: dict = field(default_factory=dict)

    @property
    def n_tokens(self) -> int:
        return sum(s.n_tokens for s in self.sources)


def sample_sources(sample, config: TokenizerConfig, series_of, with_history: bool = True) -> SampleInput:
    """Lay out a SequenceSample as sources: history records first, query last.

    ``series_of(record)`` returns the preprocessed (L_m, C_m) matrix. When
    ``with_history`` is false only the query record is kept.
    """
    observations = sample.observations if with_history else (sample.query,)
    last = len(observations) - 1
    sources = []
    for r, obs in enumerate(observations):
        for m in MODALITIES:
            rec = obs.member(m)
            if rec is None:
                continue
            sources.append(Source(
                record=r,
                modality=m,
                segments=chunk(series_of(rec), config.segment[m]),
                hour=hour_of(rec.timestamp),
                status=None if r == last else int(obs.status),
            ))
    meta = {
        "patient_id": sample.patient_id,
        "query_time": sample.query.observation_time,
        "history_status": [int(o.status) for o in sample.history] if with_history else [],
    }
    return SampleInput(sources, int(sample.label), meta)
