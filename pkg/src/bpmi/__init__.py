"""Bi-fidelity Gaussian-process classification with batch active learning."""

from .acquisition import AcquisitionConfig, Query, QueryBatch, Strategy, bpmi_score, greedy_batch, lfmi_score
from .bfgpc import BfgpcModel, Fidelity, LabeledDataset, TrainingConfig, init_model, predict_latent, predict_proba, train
from .harness import ExperimentConfig, run_experiment, summarize
from .oracles import OracleKind, OracleSpec, ToyParams

__all__ = [
    "AcquisitionConfig",
    "BfgpcModel",
    "ExperimentConfig",
    "Fidelity",
    "LabeledDataset",
    "OracleKind",
    "OracleSpec",
    "Query",
    "QueryBatch",
    "Strategy",
    "ToyParams",
    "TrainingConfig",
    "bpmi_score",
    "greedy_batch",
    "init_model",
    "lfmi_score",
    "predict_latent",
    "predict_proba",
    "run_experiment",
    "summarize",
    "train",
]
