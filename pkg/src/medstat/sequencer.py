"""Record synchronization, patient-level sequence sampling and patient-grouped folds."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .records import Cohort, MedicationStatus, Modality, TestRecord

logger = logging.getLogger(__name__)

SYNC_WINDOW = 1800


@dataclass(frozen=True)
class SynchronizedObservation:
    patient_id: str
    status: MedicationStatus
    members: tuple  # TestRecord, at most one per modality, in arrival order

    @property
    def observation_time(self) -> float:
        return float(np.mean([m.timestamp for m in self.members]))

    @property
    def modalities(self) -> list[Modality]:
        return [m.modality for m in self.members]

    def member(self, modality: Modality) -> Optional[TestRecord]:
        for m in self.members:
            if m.modality is modality:
                return m
        return None


@dataclass(frozen=True)
class SequenceSample:
    patient_id: str
    history: tuple
    query: SynchronizedObservation

    @property
    def label(self) -> MedicationStatus:
        return self.query.status

    @property
    def observations(self) -> tuple:
        return self.history + (self.query,)


@dataclass
class SequenceSet:
    samples: list = field(default_factory=list)
    skipped: int = 0


def _sort_key(rec: TestRecord):
    return (rec.timestamp, rec.modality.index)


def synchronize(records: Sequence[TestRecord], window: int = SYNC_WINDOW) -> list:
    groups = defaultdict(list)
    for rec in records:
        groups[(rec.patient_id, rec.status)].append(rec)
    out = []
    for (pid, status), recs in groups.items():
        recs = sorted(recs, key=_sort_key)
        current = [recs[0]]
        for rec in recs[1:]:
            if (rec.timestamp - current[0].timestamp <= window
                    and all(m.modality is not rec.modality for m in current)):
                current.append(rec)
            else:
                out.append(SynchronizedObservation(pid, status, tuple(current)))
                current = [rec]
        out.append(SynchronizedObservation(pid, status, tuple(current)))
    out.sort(key=lambda o: (o.patient_id, o.observation_time, o.status))
    return out


def observations_by_patient(observations) -> dict:
    by_patient = defaultdict(list)
    for obs in observations:
        by_patient[obs.patient_id].append(obs)
    for obs_list in by_patient.values():
        obs_list.sort(key=lambda o: (o.observation_time, o.status))
    return dict(by_patient)


def _strict_predecessors(obs_list, q):
    t = obs_list[q].observation_time
    return [i for i in range(q) if obs_list[i].observation_time < t]


def _pick_history(preds, K, history, rng):
    if history == "recent":
        return preds[-K:]
    if history == "oldest":
        return preds[:K]
    chosen = rng.choice(len(preds), size=K, replace=False)
    return [preds[i] for i in sorted(chosen)]


def build_sequences(observations, K: int = 4, policy: str = "last-as-query",
                    rng: Optional[np.random.Generator] = None,
                    history: str = "random") -> SequenceSet:
    """K-history + 1-query samples for every patient.

    ``observations`` is either a flat list or a ``{patient_id: chronological list}``
    mapping. ``history`` is ``"random"`` (seeded draw from the strict past),
    ``"recent"`` (the K latest predecessors) or ``"oldest"`` (the K earliest).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if policy not in ("last-as-query", "all-eligible-queries"):
        raise ValueError(f"unknown policy {policy!r}")
    if history == "random" and rng is None:
        raise ValueError("random history sampling needs an explicit generator")
    by_patient = observations if isinstance(observations, dict) else observations_by_patient(observations)
    result = SequenceSet()
    for pid in sorted(by_patient):
        obs_list = by_patient[pid]
        if len(obs_list) < K + 1:
            result.skipped += 1
            continue
        if policy == "last-as-query":
            queries = [len(obs_list) - 1]
        else:
            queries = range(len(obs_list))
        made = 0
        for q in queries:
            preds = _strict_predecessors(obs_list, q)
            if len(preds) < K:
                continue
            hist = _pick_history(preds, K, history, rng)
            result.samples.append(
                SequenceSample(pid, tuple(obs_list[i] for i in hist), obs_list[q])
            )
            made += 1
        if made == 0:
            result.skipped += 1
    if result.skipped:
        logger.warning("skipped %d patients with fewer than %d usable observations",
                       result.skipped, K + 1)
    return result


@dataclass
class FoldAssignment:
    folds: int
    seed: int
    assignment: dict

    def patients_in(self, fold: int) -> list[str]:
        return [p for p, f in self.assignment.items() if f == fold]

    def to_json(self) -> dict:
        return {"folds": self.folds, "seed": self.seed, "assignment": dict(self.assignment)}

    @classmethod
    def from_json(cls, obj: dict) -> "FoldAssignment":
        return cls(int(obj["folds"]), int(obj["seed"]),
                   {str(k): int(v) for k, v in obj["assignment"].items()})


def kfold_split(cohort: Cohort, folds: int = 5, seed: int = 0) -> FoldAssignment:
    """Greedy patient-to-fold assignment balancing record totals and label mix.

    Patients are taken largest first; each goes to the fold with the lowest
    cost, where cost is the fold's relative record load after adding the
    patient plus the L1 gap between its label distribution and the global one.
    """
    patients = cohort.patients
    if len(patients) < folds:
        raise ValueError(f"need at least {folds} patients, got {len(patients)}")
    counts = {
        p: np.bincount([r.status for r in cohort.records[p]], minlength=3).astype(float)
        for p in patients
    }
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    order.sort(key=lambda p: -counts[p].sum())  # stable: seed breaks ties
    total = sum(counts.values())
    global_dist = total / total.sum()
    target = total.sum() / folds
    fold_counts = np.zeros((folds, 3))
    assignment = {}
    for p in order:
        c = counts[p]
        after = fold_counts + c
        load = after.sum(axis=1) / target
        label_gap = np.abs(after / after.sum(axis=1, keepdims=True) - global_dist).sum(axis=1)
        f = int(np.argmin(load + label_gap))
        fold_counts[f] += c
        assignment[p] = f
    return FoldAssignment(folds, seed, {p: assignment[p] for p in patients})
