"""Cluster emails by how they look once rendered, and convict new ones by resemblance."""
from .cluster import ClusterStore, Verdict
from .config import PipelineConfig, load_config
from .embed import EmbeddingVector, cosine
from .errors import StageError, VisimailError
from .pipeline import Pipeline
from .render import Screenshot
from .vindex import VectorIndex

__version__ = "0.1.0"

__all__ = [
    "ClusterStore", "EmbeddingVector", "Pipeline", "PipelineConfig", "Screenshot", "StageError",
    "VectorIndex", "Verdict", "VisimailError", "cosine", "load_config",
]
