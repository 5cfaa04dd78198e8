"""Recursive query-guided region search for person search on synthetic scenes."""

from ._backend import BACKEND
from .config import ConfigError, RunConfig
from .data import Dataset, generate, load_dataset, make_tasks, save_dataset
from .evaluation import EvalReport, evaluate, sweep
from .geometry import BBox, Region
from .model import Model, ModelFileError
from .search import SearchTrace, search
from .training import train, train_episode

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BBox",
    "ConfigError",
    "Dataset",
    "EvalReport",
    "Model",
    "ModelFileError",
    "Region",
    "RunConfig",
    "SearchTrace",
    "evaluate",
    "generate",
    "load_dataset",
    "make_tasks",
    "save_dataset",
    "search",
    "sweep",
    "train",
    "train_episode",
]
