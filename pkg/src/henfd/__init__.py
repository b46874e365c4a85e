"""Hierarchical explainable fraud detection on user behavior sequences."""

from .autodiff import ParamStore, Tape, grad_check
from .data import Dataset, Sample, Schema, load_dataset, time_split
from .explainer import ExplanationRecord, explain_sample, risk_list
from .hen import HENModel
from .metrics import MetricReport, spauc
from .synthetic import GeneratorConfig, synthesize
from .trainer import TrainConfig, evaluate, train_supervised, train_transfer
from .transfer import TransferModel

__version__ = "0.1.0"

__all__ = [
    "Dataset", "ExplanationRecord", "GeneratorConfig", "HENModel", "MetricReport", "ParamStore", "Sample",
    "Schema", "Tape", "TrainConfig", "TransferModel", "evaluate", "explain_sample", "grad_check",
    "load_dataset", "risk_list", "spauc", "synthesize", "time_split", "train_supervised", "train_transfer",
]
