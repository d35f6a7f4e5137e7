"""Multi-camera object-level SLAM back end with quadric landmarks and open-vocabulary scene graphs."""

from .config import PipelineConfig, load_config
from .pipeline import run_pipeline

__all__ = ["PipelineConfig", "load_config", "run_pipeline"]
