"""Unmixing-guided spatial-spectral selective state-space classification of hyperspectral cubes."""
from .data import (HsiCube, LabelMap, SyntheticGroundTruth, generate_synthetic_cube, load_envi,
                   stratified_split)
from .model import ModelConfig, ModelOutput, UnmixingMamba, apply_ablation
from .scan import BACKEND as SCAN_BACKEND
from .trainer import TrainConfig, compute_loss, evaluate, train, train_unmixing

__version__ = "0.1.0"

__all__ = [
    "HsiCube", "LabelMap", "SyntheticGroundTruth", "generate_synthetic_cube", "load_envi",
    "stratified_split", "ModelConfig", "ModelOutput", "UnmixingMamba", "apply_ablation",
    "SCAN_BACKEND", "TrainConfig", "compute_loss", "evaluate", "train", "train_unmixing",
]
