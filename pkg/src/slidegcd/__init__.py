"""Slide-level graph collaboration for multiple-instance learning on bag embeddings."""

from ._kernels import BACKEND
from .config import RunConfig, TrainConfig
from .data import Dataset, PatchBag, SyntheticSpec, generate_synthetic, load_bag_file, write_bag_file
from .pipeline import SlideGCDModel, evaluate, infer, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Dataset", "PatchBag", "RunConfig", "SlideGCDModel", "SyntheticSpec", "TrainConfig",
    "evaluate", "generate_synthetic", "infer", "load_bag_file", "train", "write_bag_file",
]
