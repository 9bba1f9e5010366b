"""Promptable volumetric segmentation engine.

A server precomputes per-slice embeddings along all three axes of a volume,
answers point/box prompts in milliseconds over a binary TCP protocol, and
automates 3D segmentation by propagating prompts slice to slice.  A
deterministic classical backend stands in for learned models, so everything
here runs and tests without a GPU.
"""

from .backend import (
    Embedding,
    MaskResult,
    ModelDescriptor,
    ModelRegistry,
    PromptSet,
    ReferenceBackend,
    REFERENCE_MODEL_ID,
)
from .cache import EmbeddingCache, EmbeddingKey, precompute_plan, wl_hash
from .config import ConfigError, ServerConfig, load_config
from .nifti import NiftiError, load_volume, save_label_volume, save_volume
from .session import Box3D, DirectRoute, Session, SessionError
from .surface import extract_surface, mesh_surface_area, mesh_to_stl_bytes, save_stl
from .volume import (
    LabelVolume,
    Slice2D,
    SliceRef,
    TriangleMesh,
    Volume,
    WindowLevel,
    apply_window_level,
    default_window_level,
    extract_slice,
    slice_shape,
)

__version__ = "0.1.0"

__all__ = [
    "Box3D",
    "ConfigError",
    "DirectRoute",
    "Embedding",
    "EmbeddingCache",
    "EmbeddingKey",
    "LabelVolume",
    "MaskResult",
    "ModelDescriptor",
    "ModelRegistry",
    "NiftiError",
    "PromptSet",
    "REFERENCE_MODEL_ID",
    "ReferenceBackend",
    "ServerConfig",
    "Session",
    "SessionError",
    "Slice2D",
    "SliceRef",
    "TriangleMesh",
    "Volume",
    "WindowLevel",
    "apply_window_level",
    "default_window_level",
    "extract_slice",
    "extract_surface",
    "load_config",
    "load_volume",
    "mesh_surface_area",
    "mesh_to_stl_bytes",
    "precompute_plan",
    "save_label_volume",
    "save_stl",
    "save_volume",
    "slice_shape",
    "wl_hash",
    "__version__",
]
