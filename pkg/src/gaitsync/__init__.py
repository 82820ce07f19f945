"""Synchronisation of asynchronous multi-camera 4D point-cloud captures and template registration."""
from .config import PipelineConfig
from .estimators import HierarchicalSynchronizer, TemplateRegistrar
from .pipeline import run_pipeline
from .sync import FrameMapping, OffsetLabeling

__version__ = "0.1.0"

__all__ = ["FrameMapping", "HierarchicalSynchronizer", "OffsetLabeling", "PipelineConfig", "TemplateRegistrar",
           "run_pipeline", "__version__"]
