"""Raw test records: JSONL parsing, cohort filtering and signal preprocessing."""

from __future__ import annotations

import enum
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import kernels

MIN_RECORDS_PER_PATIENT = 6


class RecordError(ValueError):
    """Raised for malformed or invalid record input."""


class Modality(enum.Enum):
    TAPPING = "tapping"
    WALKING = "walking"
    MEMORY = "memory"

    @property
    def index(self) -> int:
        return _MODALITY_ORDER.index(self)

    @property
    def channels(self) -> int:
        return 3

    @property
    def max_length(self) -> int:
        return 32 if self is Modality.MEMORY else 1024

    @property
    def is_accelerometer(self) -> bool:
        return self is not Modality.MEMORY


_MODALITY_ORDER = (Modality.TAPPING, Modality.WALKING, Modality.MEMORY)


class MedicationStatus(enum.IntEnum):
    ANOTHER_TIME = 0
    BEFORE_MEDICATION = 1
    AFTER_MEDICATION = 2

    @property
    def wire_name(self) -> str:
        return _STATUS_WIRE[self]

    @classmethod
    def from_wire(cls, name: str) -> "MedicationStatus":
        for status, wire in _STATUS_WIRE.items():
            if wire == name:
                return status
        raise RecordError(f"unknown status {name!r}")


_STATUS_WIRE = {
    MedicationStatus.ANOTHER_TIME: "another_time",
    MedicationStatus.BEFORE_MEDICATION: "before_med",
    MedicationStatus.AFTER_MEDICATION: "after_med",
}


def modality_from_wire(name: str) -> Modality:
    try:
        return Modality(name)
    except ValueError:
        raise RecordError(f"unknown modality {name!r}") from None


@dataclass(frozen=True)
class TestRecord:
    """One raw test: value channels in ``series`` and per-sample times in ``sample_times``.

    For memory tests the channels are (actual, target, score) per touch.
    """

    __test__ = False  # not a pytest class

    patient_id: str
    modality: Modality
    timestamp: int
    status: MedicationStatus
    series: np.ndarray
    sample_times: np.ndarray
    is_pd: bool = True
    age: Optional[float] = None
    sex: Optional[str] = None

    @property
    def raw_length(self) -> int:
        return int(self.series.shape[0])


@dataclass
class Cohort:
    records: "OrderedDict[str, list[TestRecord]]" = field(default_factory=OrderedDict)

    @property
    def patients(self) -> list[str]:
        return list(self.records)

    def all_records(self) -> list[TestRecord]:
        return [r for recs in self.records.values() for r in recs]

    def demographics(self, patient_id: str) -> dict:
        rec = self.records[patient_id][0]
        return {"age": rec.age, "sex": rec.sex}

    def __len__(self) -> int:
        return len(self.records)


def _record_from_obj(obj: dict) -> TestRecord:
    for key in ("patient_id", "modality", "timestamp", "status", "samples"):
        if key not in obj:
            raise RecordError(f"missing key {key!r}")
    modality = modality_from_wire(obj["modality"])
    status = MedicationStatus.from_wire(obj["status"])
    samples = obj["samples"]
    if not isinstance(samples, list) or not samples:
        raise RecordError("samples must be a nonempty list")
    width = 1 + modality.channels
    for row in samples:
        if not isinstance(row, list) or len(row) != width:
            raise RecordError(
                f"channel count mismatch for {modality.value}: expected {modality.channels} "
                f"value channels per sample"
            )
    arr = np.asarray(samples, dtype=np.float64)
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    return TestRecord(
        patient_id=str(obj["patient_id"]),
        modality=modality,
        timestamp=int(obj["timestamp"]),
        status=status,
        series=arr[:, 1:].copy(),
        sample_times=arr[:, 0].copy(),
        is_pd=bool(obj.get("is_pd", True)),
        age=obj.get("age"),
        sex=obj.get("sex"),
    )


def parse_records(stream: Iterable[str]) -> list[TestRecord]:
    """Parse line-delimited JSON records, preserving input order.

    Blank lines are skipped. Errors carry the 1-based line number.
    """
    records = []
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise RecordError("line is not a JSON object")
            records.append(_record_from_obj(obj))
        except json.JSONDecodeError as exc:
            raise RecordError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        except RecordError as exc:
            raise RecordError(f"line {lineno}: {exc}") from None
    return records


def record_to_obj(record: TestRecord) -> dict:
    samples = np.column_stack([record.sample_times, record.series]).tolist()
    obj = {
        "patient_id": record.patient_id,
        "modality": record.modality.value,
        "timestamp": record.timestamp,
        "status": record.status.wire_name,
        "is_pd": record.is_pd,
        "samples": samples,
    }
    if record.age is not None:
        obj["age"] = record.age
    if record.sex is not None:
        obj["sex"] = record.sex
    return obj


def serialize_records(records: Iterable[TestRecord]) -> str:
    return "".join(json.dumps(record_to_obj(r)) + "\n" for r in records)


def filter_cohort(records: Iterable[TestRecord]) -> Cohort:
    # status/PD filter runs before the per-patient count filter
    grouped: "OrderedDict[str, list[TestRecord]]" = OrderedDict()
    for rec in records:
        if not rec.is_pd or not isinstance(rec.status, MedicationStatus):
            continue
        grouped.setdefault(rec.patient_id, []).append(rec)
    kept = OrderedDict(
        (pid, recs) for pid, recs in grouped.items() if len(recs) >= MIN_RECORDS_PER_PATIENT
    )
    return Cohort(kept)


def high_pass_filter(series: np.ndarray, sample_rate: float = 100.0,
                     cutoff: float = 0.3) -> np.ndarray:
    """Zero-phase first-order high-pass, applied per channel.

    Forward then backward pass of ``y[i] = a * (y[i-1] + x[i] - x[i-1])`` with
    ``a = rc / (rc + dt)``. Each pass starts at steady state for a constant
    input, so a DC offset is removed without a start-up transient.
    """
    if sample_rate <= 0:
        raise RecordError("sample_rate must be positive")
    if cutoff <= 0 or sample_rate <= 2 * cutoff:
        raise RecordError("require 0 < cutoff < sample_rate / 2")
    x = np.ascontiguousarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if not np.all(np.isfinite(x)):
        raise RecordError("non-finite values in series")
    rc = 1.0 / (2.0 * math.pi * cutoff)
    dt = 1.0 / sample_rate
    alpha = rc / (rc + dt)
    out = kernels.highpass_fb(x, alpha)
    return out.reshape(series.shape) if np.ndim(series) == 1 else out


def pad_or_truncate(series: np.ndarray, length: int) -> np.ndarray:
    if length < 1:
        raise RecordError("target length must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    out = np.zeros((length, x.shape[1]))
    n = min(length, x.shape[0])
    out[:n] = x[:n]
    return out


def memory_series(events, length: int = 32) -> np.ndarray:
    """(time, actual, target, score) touch events -> (length, 3) value matrix."""
    rows = [(a, t, s) for _, a, t, s in events]
    if not rows:
        return np.zeros((length, 3))
    return pad_or_truncate(np.asarray(rows, dtype=np.float64), length)


@dataclass(frozen=True)
class PreprocessConfig:
    sample_rate: float = 100.0
    cutoff: float = 0.3


def preprocess(record: TestRecord, config: PreprocessConfig = PreprocessConfig(),
               lengths: Optional[dict] = None) -> np.ndarray:
    """Fixed-length (L_m, C_m) model input for one record."""
    length = (lengths or {}).get(record.modality, record.modality.max_length)
    series = record.series
    if record.modality.is_accelerometer:
        series = high_pass_filter(series, config.sample_rate, config.cutoff)
    return pad_or_truncate(series, length)
