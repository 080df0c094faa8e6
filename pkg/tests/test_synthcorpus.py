import json

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import GroupKFold, cross_val_predict

from medstat.records import filter_cohort, parse_records, serialize_records
from medstat.synthcorpus import SynthConfig, generate, write_corpus
from medstat.training import one_vs_rest_auc


def band_energy(record, lo=3.5, hi=6.5, rate=100.0):
    x = record.series - record.series.mean(axis=0)
    spectrum = np.fft.rfft(x, axis=0)
    freqs = np.fft.rfftfreq(len(x), 1 / rate)
    band = (freqs >= lo) & (freqs <= hi)
    return float((np.abs(spectrum[band]) ** 2).sum())


@pytest.fixture(scope="module")
def default_corpus():
    return generate(SynthConfig())


@pytest.fixture(scope="module")
def energies(default_corpus):
    cohort = filter_cohort(default_corpus[0])
    rows = []
    for pid, recs in cohort.records.items():
        acc = [r for r in recs if r.modality.is_accelerometer]
        e = np.array([band_energy(r) for r in acc])
        for r, ei in zip(acc, e):
            rows.append((pid, int(r.status), ei, ei / np.median(e)))
    pids, status, absolute, relative = map(np.array, zip(*rows))
    return pids, status, absolute, relative


def test_seeded_generation_is_byte_identical(tmp_path):
    cfg = SynthConfig(patients=4, seed=11)
    paths = []
    for name in ("a", "b"):
        corpus, manifest = tmp_path / f"{name}.jsonl", tmp_path / f"{name}.json"
        write_corpus(cfg, corpus, manifest)
        paths.append((corpus.read_bytes(), manifest.read_bytes()))
    assert paths[0] == paths[1]
    other = tmp_path / "c.jsonl"
    write_corpus(SynthConfig(patients=4, seed=12), other, tmp_path / "c.json")
    assert other.read_bytes() != paths[0][0]


def test_records_validate_and_survive_filter(default_corpus):
    records, manifest = default_corpus
    back = parse_records(serialize_records(records).splitlines())
    assert len(back) == len(records)
    cohort = filter_cohort(back)
    assert len(cohort.patients) == 60 == len(manifest["patients"])
    for pid, recs in cohort.records.items():
        assert {int(r.status) for r in recs} == {0, 1, 2}
    for r in back:
        if r.modality.is_accelerometer:
            assert r.series.shape == (1024, 3)
            np.testing.assert_allclose(np.diff(r.sample_times), 0.01, atol=1e-9)


def test_class_proportions_follow_status_mix(default_corpus):
    statuses = np.array([int(r.status) for r in default_corpus[0]])
    props = np.bincount(statuses, minlength=3) / len(statuses)
    np.testing.assert_allclose(props, SynthConfig().status_mix, atol=0.02)


def test_manifest_records_latents(default_corpus):
    records, manifest = default_corpus
    lat = manifest["patients"][0]
    for key in ("amplitude", "tremor_freq", "phase", "gait_freq", "memory_baseline", "records"):
        assert key in lat
    assert 0.5 <= lat["amplitude"] <= 2.0 and 4.0 <= lat["tremor_freq"] <= 6.0
    assert sum(len(p["records"]) for p in manifest["patients"]) == len(records)
    json.dumps(manifest)


def test_tremor_amplitude_follows_status_multiplier(default_corpus):
    records, manifest = default_corpus
    lat = {p["patient_id"]: p for p in manifest["patients"]}
    for r in records[:40]:
        if not r.modality.is_accelerometer:
            continue
        p = lat[r.patient_id]
        w = np.asarray(p["channel_weights"][0])
        t = r.sample_times
        # least-squares projection onto the known tremor sinusoid
        proj = r.series @ w
        basis = np.sin(2 * np.pi * p["tremor_freq"] * t + p["phase"])
        amp = basis @ proj / (basis @ basis)
        expected = p["amplitude"] * SynthConfig().status_multiplier[int(r.status)]
        assert amp == pytest.approx(expected, abs=0.1)


def test_per_patient_relative_energy_oracle_separates_before_and_after(energies):
    _, status, _, relative = energies
    mask = status > 0
    assert roc_auc_score(status[mask] == 1, relative[mask]) >= 0.95


def _grouped_ovr_auc(feature, status, pids):
    x = np.log(feature)[:, None]
    x = np.hstack([x, x ** 2])
    probs = cross_val_predict(LogisticRegression(max_iter=1000), x, status,
                              groups=pids, cv=GroupKFold(5), method="predict_proba")
    return one_vs_rest_auc(status, probs)[0]


def test_context_free_decoding_is_strictly_worse(energies):
    pids, status, absolute, relative = energies
    without = _grouped_ovr_auc(absolute, status, pids)
    with_context = _grouped_ovr_auc(relative, status, pids)
    assert 0.6 <= without <= 0.8  # patient-agnostic oracle lands near 0.7
    assert with_context > without + 0.1


def test_unit_multipliers_make_status_undecodable():
    cfg = SynthConfig(status_multiplier=(1.0, 1.0, 1.0), seed=5)
    cohort = filter_cohort(generate(cfg)[0])
    rows = []
    for recs in cohort.records.values():
        acc = [r for r in recs if r.modality.is_accelerometer]
        e = np.array([band_energy(r) for r in acc])
        rows += [(int(r.status), ei / np.median(e)) for r, ei in zip(acc, e)]
    status, rel = map(np.array, zip(*rows))
    mask = status > 0
    assert abs(roc_auc_score(status[mask] == 1, rel[mask]) - 0.5) < 0.08


@pytest.mark.parametrize("bad", [dict(modality_mix=(0.5, 0.5, 0.5)),
                                 dict(status_multiplier=(1.0, 0.0, 1.0)),
                                 dict(min_records=5, max_records=4)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)
