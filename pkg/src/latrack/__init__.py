"""Anchor-free Siamese tracker with a localization-aware prediction head."""

from .geometry import Box, Grid
from .labeling import LabelConfig
from .model import ModelConfig, SiamNet, load_checkpoint, save_checkpoint
from .tracker import PostProcessConfig, Tracker, track_sequence
from .training import SyntheticConfig, TrainConfig, gen_synthetic_sequence, train

__version__ = "0.1.0"

__all__ = [
    "Box", "Grid", "LabelConfig", "ModelConfig", "SiamNet",
    "PostProcessConfig", "SyntheticConfig", "TrainConfig", "Tracker",
    "gen_synthetic_sequence", "load_checkpoint", "save_checkpoint",
    "track_sequence", "train", "__version__",
]
