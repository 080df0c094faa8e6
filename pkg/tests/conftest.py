import numpy as np
import pytest

from medstat.params import EncoderConfig, ModelConfig
from medstat.records import MedicationStatus, Modality, TestRecord
from medstat.tokenizer import TokenizerConfig

T, W, M = Modality.TAPPING, Modality.WALKING, Modality.MEMORY


def make_record(pid="p0", modality=T, ts=0, status=MedicationStatus.BEFORE_MEDICATION,
                n=None, rng=None, is_pd=True, age=60.0, sex="female"):
    rng = rng or np.random.default_rng(0)
    n = n or (8 if modality is M else 64)
    times = np.arange(n, dtype=float) / 100.0
    series = rng.normal(size=(n, 3))
    return TestRecord(pid, modality, int(ts), MedicationStatus(status), series, times,
                      is_pd=is_pd, age=age, sex=sex)


def tiny_config(d=8, layers=2, heads=2, G=2, shuffle=True, seq=True, encodings=None,
                S=16, L=32, memory_S=4, memory_L=8):
    tok = TokenizerConfig(d=d, segment={T: S, W: S, M: memory_S},
                          lengths={T: L, W: L, M: memory_L})
    kwargs = {} if encodings is None else {"encodings": encodings}
    return ModelConfig(tok, EncoderConfig(layers=layers, heads=heads, G=G, shuffle=shuffle),
                       sequence_modeling=seq, **kwargs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_input(config, rng, n_history=2, query_modalities=(T,), label=1, history_modalities=(T,)):
    """Random SampleInput laid out like sample_sources output (history first, query last)."""
    from medstat.tokenizer import SampleInput, Source

    tok = config.tokenizer
    sources = []
    records = [(r, history_modalities, int(rng.integers(0, 3))) for r in range(n_history)]
    records.append((n_history, query_modalities, None))
    for r, mods, status in records:
        for m in mods:
            n = tok.tokens_per_source(m)
            sources.append(Source(r, m, rng.normal(size=(n, tok.width(m))),
                                  int(rng.integers(0, 24)), status))
    return SampleInput(sources, label, {"patient_id": "p", "query_time": 0.0})


# -- acceptance reporting ------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line for the terminal summary."""
    def record(n, ok, detail):
        _ACCEPTANCE[n] = (bool(ok), detail)
        print(f"ACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
