"""Simulation of hybrid parameter-plus-logits federated learning for lithography hotspot detection."""
__version__ = "0.1.0"

from . import data, diagnostics, nn
from .baselines import ALGORITHMS, BaselineConfig, run_fedavg, run_fedmd, run_fedprox, run_local
from .config import ExperimentConfig, load_config
from .data import Dataset, PartitionPlan, generate_synthetic, partition, split_public_private
from .estimators import CNNClassifier, FedKDHybridClassifier
from .exceptions import (
    ConfigError,
    DatasetFormatError,
    FedKDError,
    InvariantError,
    NonFiniteError,
    PartitionError,
    ShapeError,
)
from .protocol import ClientModel, RoundConfig, ServerState, make_clients, run_fedkd_hybrid, run_round

__all__ = [
    "ALGORITHMS", "BaselineConfig", "CNNClassifier", "ClientModel", "ConfigError", "Dataset", "DatasetFormatError",
    "ExperimentConfig", "FedKDError", "FedKDHybridClassifier", "InvariantError", "NonFiniteError", "PartitionError",
    "PartitionPlan", "RoundConfig", "ServerState", "ShapeError", "data", "diagnostics",
    "generate_synthetic", "load_config", "make_clients", "nn", "partition", "run_fedavg",
    "run_fedkd_hybrid", "run_fedmd", "run_fedprox", "run_local", "run_round", "split_public_private",
]
