"""FedGID: federated learning with global intervention and global distillation.

A small numpy laboratory for studying out-of-distribution generalisation under
attribute skew across federated clients.
"""
from .datagen import DatasetSpec, ImageSet, dirichlet_partition, generate_dataset, load_dataset, save_dataset
from .distillation import DistillConfig
from .federation import RunResult, TrainConfig, run_experiment
from .intervention import InterventionConfig
from .model import Arch, ModelParams, init_params

__version__ = "0.1.0"

__all__ = [
    "Arch", "DatasetSpec", "DistillConfig", "ImageSet", "InterventionConfig", "ModelParams",
    "RunResult", "TrainConfig", "dirichlet_partition", "generate_dataset", "init_params",
    "load_dataset", "run_experiment", "save_dataset",
]
