"""Graph neural network engine: layers, models, training.

Forward and reverse-mode passes are hand-written over a small fixed
architecture zoo (GIN or PNA stacks, a readout, and an MLP head), which
keeps every gradient auditable against finite differences.
"""

from histograph.gnn.model import (
    GnnConfig, GnnModel, cross_entropy, hact_backward, hact_forward,
    load_checkpoint, predict, predict_hact, save_checkpoint, softmax,
    checkpoint_to_dict, checkpoint_from_dict,
)
from histograph.gnn.train import TrainConfig, mean_log_degree, train_hact, train_model

__all__ = [
    "GnnConfig", "GnnModel", "TrainConfig", "cross_entropy", "hact_backward",
    "hact_forward", "load_checkpoint", "mean_log_degree", "predict",
    "predict_hact", "save_checkpoint", "softmax", "train_hact", "train_model",
    "checkpoint_to_dict", "checkpoint_from_dict",
]
