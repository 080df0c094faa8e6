"""Seeded synthetic corpus with a known, patient-conditional status signal.

Each patient has a base tremor amplitude. Medication status scales it, so
the status of a record is easy to read against the patient's own history
but ambiguous across patients: the amplitude range is wide enough that one
patient's "before" overlaps another's "after".
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .records import MedicationStatus, Modality, TestRecord, serialize_records

START_EPOCH = 1425859200  # 2015-03-09T00:00:00Z
STUDY_DAYS = 180
FS = 100.0
N_SAMPLES = 1024


@dataclass(frozen=True)
class SynthConfig:
    patients: int = 60
    min_records: int = 8
    max_records: int = 40
    modality_mix: tuple = (0.56, 0.34, 0.10)
    status_mix: tuple = (0.5, 0.25, 0.25)
    amplitude_range: tuple = (0.5, 2.0)
    # indexed by MedicationStatus: another time, before, after
    status_multiplier: tuple = (1.0, 1.5, 0.6)
    tremor_band: tuple = (4.0, 6.0)
    gait_band: tuple = (1.5, 2.2)
    noise: float = 0.3
    gravity: float = 1.0
    # (peak hours, spread in hours) per status
    hour_peaks: tuple = ((), (9.5, 14.5), (10.0, 15.0))
    hour_spread: float = 2.0
    memory_score_shift: tuple = (0.0, -0.5, 0.5)
    multi_modal_session: float = 0.3
    onset_jitter: float = 0.0  # seconds
    # per-record gait amplitude factor drawn from 1 +- gait_variability
    gait_variability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("modality_mix", "status_mix"):
            probs = getattr(self, name)
            if len(probs) != 3 or min(probs) < 0 or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
                raise ValueError(f"{name} must be 3 probabilities summing to 1")
        if min(self.status_multiplier) <= 0:
            raise ValueError("status multipliers must be > 0")
        if not 0 <= self.gait_variability < 1:
            raise ValueError("gait_variability must be in [0, 1)")
        if not 1 <= self.min_records <= self.max_records:
            raise ValueError("invalid records-per-patient range")


@dataclass
class PatientLatent:
    patient_id: str
    amplitude: float
    tremor_freq: float
    phase: float
    gait_freq: float
    gait_amplitude: float
    gait_phase: float
    channel_weights: list
    memory_baseline: float
    age: int
    sex: str
    records: list = field(default_factory=list)


def _draw_hour(rng, status: int, cfg: SynthConfig) -> float:
    peaks = cfg.hour_peaks[status]
    if not peaks:
        return float(rng.uniform(7.0, 22.0))
    h = rng.choice(peaks) + rng.normal(0.0, cfg.hour_spread)
    return float(np.clip(h, 0.0, 23.99))


def _status_sequence(rng, n: int, mix) -> list[int]:
    """Shuffled per-patient statuses: quota rounding of ``mix``, each status at least once."""
    raw = np.asarray(mix) * n
    counts = np.floor(raw).astype(int)
    frac = raw - counts + rng.uniform(0, 1e-6, size=3)
    counts[np.argsort(-frac)[: n - counts.sum()]] += 1
    while counts.min() < 1:
        counts[counts.argmax()] -= 1
        counts[counts.argmin()] += 1
    return [int(s) for s in rng.permutation(np.repeat(np.arange(3), counts))]


def _accelerometer(rng, lat: PatientLatent, status: int, cfg: SynthConfig) -> np.ndarray:
    t = np.arange(N_SAMPLES) / FS
    # a test starts at an arbitrary point of the patient's tremor/gait cycle
    onset = rng.uniform(0.0, cfg.onset_jitter)
    amp = lat.amplitude * cfg.status_multiplier[status]
    tremor = amp * np.sin(2 * np.pi * lat.tremor_freq * (t + onset) + lat.phase)
    gait_amp = lat.gait_amplitude * rng.uniform(1.0 - cfg.gait_variability, 1.0 + cfg.gait_variability)
    gait = gait_amp * np.sin(2 * np.pi * lat.gait_freq * (t + onset) + lat.gait_phase)
    w = np.asarray(lat.channel_weights)
    x = tremor[:, None] * w[0] + gait[:, None] * w[1]
    x += rng.normal(0.0, cfg.noise, size=x.shape)
    x[:, 2] += cfg.gravity
    return np.column_stack([t, x])


def _memory(rng, lat: PatientLatent, status: int, cfg: SynthConfig) -> np.ndarray:
    n = int(rng.integers(12, 33))
    target = rng.integers(0, 9, size=n).astype(float)
    err = rng.random(n) < 0.15
    actual = np.where(err, rng.integers(0, 9, size=n), target).astype(float)
    score = lat.memory_baseline + cfg.memory_score_shift[status] + rng.normal(0, 0.3, size=n)
    t = np.sort(rng.uniform(0, 30, size=n))
    return np.column_stack([t, actual, target, score])


def generate(config: SynthConfig = SynthConfig()):
    """Records (timestamp-sorted per patient) and a JSON-ready manifest of every latent."""
    rng = np.random.default_rng(config.seed)
    records, latents = [], []
    modalities = (Modality.TAPPING, Modality.WALKING, Modality.MEMORY)
    for n in range(config.patients):
        w = rng.normal(size=(2, 3))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        lat = PatientLatent(
            patient_id=f"P{n:04d}",
            amplitude=float(rng.uniform(*config.amplitude_range)),
            tremor_freq=float(rng.uniform(*config.tremor_band)),
            phase=float(rng.uniform(0, 2 * np.pi)),
            gait_freq=float(rng.uniform(*config.gait_band)),
            gait_amplitude=float(rng.uniform(0.5, 1.5)),
            gait_phase=float(rng.uniform(0, 2 * np.pi)),
            channel_weights=w.tolist(),
            memory_baseline=float(rng.uniform(-1.0, 1.0)),
            age=int(rng.integers(45, 83)),
            sex=str(rng.choice(["female", "male"])),
        )
        count = int(rng.integers(config.min_records, config.max_records + 1))
        sessions = []
        while sum(sessions) < count:
            sessions.append(min(2 if rng.random() < config.multi_modal_session else 1,
                                count - sum(sessions)))
        days = np.sort(rng.choice(STUDY_DAYS, size=len(sessions), replace=False))
        statuses = _status_sequence(rng, len(sessions), config.status_mix)
        patient_records = []
        for day, status, size in zip(days, statuses, sessions):
            status = int(status)
            hour = _draw_hour(rng, status, config)
            ts = START_EPOCH + int(day) * 86400 + int(hour * 3600)
            picked = []
            while len(picked) < size:
                m = modalities[rng.choice(3, p=config.modality_mix)]
                if m not in picked:
                    picked.append(m)
            for modality in picked:
                if modality is Modality.MEMORY:
                    samples = _memory(rng, lat, status, config)
                else:
                    samples = _accelerometer(rng, lat, status, config)
                samples = np.round(samples, 4)
                rec = TestRecord(lat.patient_id, modality, ts, MedicationStatus(status),
                                 samples[:, 1:], samples[:, 0], True, lat.age, lat.sex)
                patient_records.append(rec)
                lat.records.append({"timestamp": ts, "modality": modality.value,
                                    "status": status})
                ts += int(rng.integers(60, 600))
        records.extend(patient_records)
        latents.append(lat)
    manifest = {"config": _config_json(config), "patients": [asdict(l) for l in latents]}
    return records, manifest


def _config_json(config: SynthConfig) -> dict:
    return json.loads(json.dumps(asdict(config)))


def write_corpus(config: SynthConfig, corpus_path, manifest_path) -> None:
    records, manifest = generate(config)
    with open(corpus_path, "w") as fh:
        fh.write(serialize_records(records))
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1)
