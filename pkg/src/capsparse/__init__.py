"""Capsule autoencoder with rank-based sparse masking, plus the tools to train and probe it."""
from .capsnet import CapsNetModel, Geometry
from .config import ExperimentConfig, desk_profile, paper_profile
from .sparsity import SparseController, SparsityConfig, SparsityState

__all__ = ["CapsNetModel", "Geometry", "ExperimentConfig", "desk_profile", "paper_profile",
           "SparseController", "SparsityConfig", "SparsityState"]
__version__ = "0.1.0"
