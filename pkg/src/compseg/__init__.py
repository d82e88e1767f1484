"""Missing-modality semantic segmentation with dual Distinct/Supplement
encoders, hierarchical hybrid fusion, classwise feature learning, and a
disentanglement + distillation training objective."""

from .config import ExperimentConfig
from .data import (FULL, MISSING_NDSM, MISSING_RGIR, Modality, SamplePatch,
                   ScenarioMask, Signal, SyntheticSpec, generate_synthetic)
from .engine import evaluate, fit, load_checkpoint, penultimate_distance, save_checkpoint
from .model import SegModel, route

__all__ = [
    "ExperimentConfig", "FULL", "MISSING_NDSM", "MISSING_RGIR", "Modality",
    "SamplePatch", "ScenarioMask", "Signal", "SyntheticSpec",
    "generate_synthetic", "evaluate", "fit", "load_checkpoint",
    "penultimate_distance", "save_checkpoint", "SegModel", "route",
]

__version__ = "0.1.0"
