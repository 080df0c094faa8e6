"""Personalized medication-status prediction from smartphone sensor tests."""

from .encoder import forward
from .params import EncoderConfig, ModelConfig, ModelParams, init_params
from .records import Cohort, MedicationStatus, Modality, TestRecord, filter_cohort, parse_records
from .sequencer import build_sequences, kfold_split, synchronize
from .synthcorpus import SynthConfig, generate
from .tokenizer import TokenizerConfig, sample_sources
from .training import (PatientData, TrainConfig, evaluate, run_ablations, run_kfold,
                       train)

__version__ = "0.1.0"

__all__ = [
    "Cohort", "EncoderConfig", "MedicationStatus", "Modality", "ModelConfig", "ModelParams",
    "PatientData", "SynthConfig", "TestRecord", "TokenizerConfig", "TrainConfig",
    "build_sequences", "evaluate", "filter_cohort", "forward", "generate", "init_params",
    "kfold_split", "parse_records", "run_ablations", "run_kfold", "sample_sources",
    "synchronize", "train",
]
