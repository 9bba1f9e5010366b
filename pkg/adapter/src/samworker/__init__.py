"""External model worker speaking the segmentation server's wire protocol."""

from .presets import PRESETS, ModelPreset, resolve_preset
from .worker import Worker, WorkerError

__all__ = ["ModelPreset", "PRESETS", "resolve_preset", "Worker", "WorkerError"]
