"""Numpy MobileNetV3-style chest X-ray classifier with fp16 inference emulation."""
from .data import DatasetIndex, load_corpus, make_batches, synth_blob_dataset
from .fp16 import divergence, infer_mixed, quantize_model
from .metrics import ConfusionMatrix, EvalReport, classification_report, confusion, emit, roc_auc
from .modelio import load, save
from .nn import Model, ModelSpec, build_model, preset
from .optim import OptimizerState, lr_at_epoch, momentum_step
from .training import TrainConfig, backward, softmax_cross_entropy, train

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix", "DatasetIndex", "EvalReport", "Model", "ModelSpec", "OptimizerState",
    "TrainConfig", "backward", "build_model", "classification_report", "confusion", "divergence",
    "emit", "infer_mixed", "load", "load_corpus", "lr_at_epoch", "make_batches", "momentum_step",
    "preset", "quantize_model", "roc_auc", "save", "softmax_cross_entropy", "synth_blob_dataset", "train",
]
