"""Adversarial intensity normalization for multi-domain 3-D segmentation.

A generator G maps input patches to a normalized intensity space, a segmenter
S labels the normalized patches and a (K+1)-class discriminator D separates
the K acquisition domains from generated images. G and S minimize the
weighted Dice loss while trying to make D label generated patches as real;
D is trained in alternation to classify domains and spot generated patches.
"""
from .config import ExperimentConfig, load_config
from .estimator import AdversarialNormalizer
from .exceptions import (
    AdvNormError,
    CorruptionError,
    DegenerateInputError,
    DivergenceError,
    FormatError,
    ShapeError,
    ValidationError,
)
from .trainer import Trainer, TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "AdversarialNormalizer", "ExperimentConfig", "load_config", "Trainer", "TrainConfig", "run_training",
    "AdvNormError", "ValidationError", "FormatError", "CorruptionError", "DegenerateInputError",
    "ShapeError", "DivergenceError",
]
