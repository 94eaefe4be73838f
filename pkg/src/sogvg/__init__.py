"""One-stage visual grounding with a suspected-object graph."""

__version__ = "0.1.0"

from .config import DataConfig, ModelConfig, RunConfig, TrainConfig
from .model import GroundingModel

__all__ = [
    "DataConfig",
    "GroundingModel",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "__version__",
]
