"""Coarse-to-fine 3D landmark detection with structure-aware recurrent refinement."""
from .config import TrainConfig, paper_preset
from .metrics import MetricsReport, radial_errors, summarize, time_inference
from .model import Detector, RefineTrace
from .phantom import PhantomSpec, generate_dataset, generate_phantom
from .training import train_loop
from .volume import LandmarkSet, Patch, Volume, load_landmarks, load_volume, save_landmarks, \
    save_volume

__version__ = "0.1.0"

__all__ = [
    "Detector", "LandmarkSet", "MetricsReport", "Patch", "PhantomSpec", "RefineTrace",
    "TrainConfig", "Volume", "generate_dataset", "generate_phantom", "load_landmarks",
    "load_volume", "paper_preset", "radial_errors", "save_landmarks", "save_volume",
    "summarize", "time_inference", "train_loop",
]
