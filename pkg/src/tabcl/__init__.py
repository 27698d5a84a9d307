"""Contrastive tabular encoders with OOD-aware continual adaptation."""

from .config import RunConfig, load_config
from .pipeline import STAGES, run_pipeline

__version__ = "0.1.0"

__all__ = ["RunConfig", "STAGES", "load_config", "run_pipeline", "__version__"]
