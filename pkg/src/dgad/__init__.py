"""Toy diffusion model for geometry-editable, appearance-preserving object composition."""
from .config import RunConfig, load_config
from .data import CompositeSample, DataConfig, build_dataset, generate_sample, load_split
from .model import ARMS, DgadModel, ModelConfig, compose
from .schedule import make_linear_schedule
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = ["ARMS", "CompositeSample", "DataConfig", "DgadModel", "ModelConfig", "RunConfig", "TrainConfig",
           "Trainer", "build_dataset", "compose", "generate_sample", "load_config", "load_split",
           "make_linear_schedule"]
