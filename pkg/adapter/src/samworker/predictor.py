"""Model-side compute and the geometry between slice space and model space.

The worker always hands the model a square `input_size` image. Points and
boxes are scaled into that space (a point (r, c) on a 256-row slice with a
1024 input lands at (4r, 4c)); the returned mask is sampled back to slice
resolution with nearest neighbor.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .presets import ARCH_FOR, ModelPreset


class WeightLoadError(Exception):
    """Checkpoint or model-stack failure at startup."""


class SlicePredictor:
    """What the worker needs from a model.

    embed() runs the image encoder on an (S, S, 3) uint8 image and returns
    an opaque handle; predict() runs prompt encoder + mask decoder against
    a stored handle. Coordinates are (row, col) floats in model space,
    labels are 1 for foreground points and 0 for background.
    """

    input_size: int = 1024

    def embed(self, image: np.ndarray):
        raise NotImplementedError

    def predict(self, embedding, point_coords, point_labels, box):
        """Returns (mask bool (S, S), score float), best candidate only."""
        raise NotImplementedError


def to_model_input(pixels: np.ndarray, size: int) -> np.ndarray:
    """[0,1] float slice -> (size, size, 3) uint8 model input."""
    q = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.shape != (size, size):
        img = Image.fromarray(q, mode="L").resize((size, size), Image.BILINEAR)
        q = np.asarray(img, dtype=np.uint8)
    return np.stack([q, q, q], axis=-1)


def scale_points(points, rows: int, cols: int, size: int) -> np.ndarray:
    """Slice-space (row, col) ints -> model-space float coords, (N, 2)."""
    out = np.array(points, dtype=np.float64).reshape(-1, 2)
    out[:, 0] *= size / rows
    out[:, 1] *= size / cols
    return out


def scale_box(bbox, rows: int, cols: int, size: int) -> np.ndarray:
    r0, c0, r1, c1 = bbox
    sy, sx = size / rows, size / cols
    return np.array([r0 * sy, c0 * sx, r1 * sy, c1 * sx], dtype=np.float64)


def mask_to_slice(mask: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Nearest-neighbor sample of an (S, S) mask down to (rows, cols)."""
    size = mask.shape[0]
    if (rows, cols) == mask.shape:
        return mask.astype(np.uint8)
    rr = (np.arange(rows) * size) // rows
    cc = (np.arange(cols) * size) // cols
    return mask[np.ix_(rr, cc)].astype(np.uint8)


class SamBridge(SlicePredictor):
    """Adapter over the segment-anything / MobileSAM predictor API.

    Imports happen lazily here so the worker package stays usable (and
    testable) without torch installed.
    """

    def __init__(self, preset: ModelPreset):
        try:
            import torch

            arch = ARCH_FOR[preset.model_id]
            if arch == "vit_t":
                from mobile_sam import SamPredictor, sam_model_registry
            else:
                from segment_anything import SamPredictor, sam_model_registry
            sam = sam_model_registry[arch](checkpoint=preset.weights)
        except Exception as exc:
            raise WeightLoadError(f"{preset.model_id}: {exc}") from exc
        device = "cuda" if torch.cuda.is_available() else "cpu"
        sam.to(device)
        sam.eval()
        self._sam = SamPredictor(sam)
        self.input_size = preset.input_size

    def embed(self, image):
        p = self._sam
        p.set_image(image)
        # everything predict() needs to re-arm the predictor later
        return (p.features, p.input_size, p.original_size)

    def predict(self, embedding, point_coords, point_labels, box):
        p = self._sam
        p.features, p.input_size, p.original_size = embedding
        p.is_image_set = True
        coords = labels = None
        if len(point_coords):
            coords = point_coords[:, ::-1].copy()  # (row, col) -> SAM's (x, y)
            labels = np.asarray(point_labels, dtype=np.int64)
        sam_box = None
        if box is not None:
            r0, c0, r1, c1 = box
            sam_box = np.array([c0, r0, c1, r1], dtype=np.float64)
        masks, scores, _ = p.predict(
            point_coords=coords,
            point_labels=labels,
            box=sam_box,
            multimask_output=True,
        )
        best = int(np.argmax(scores))
        return masks[best].astype(bool), float(scores[best])


def build_bridge(preset: ModelPreset) -> SamBridge:
    preset.check_weights()
    return SamBridge(preset)
