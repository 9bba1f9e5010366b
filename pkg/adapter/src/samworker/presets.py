"""Model presets: everything the worker needs to run one checkpoint."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class ModelPreset:
    model_id: str
    weights: str  # checkpoint path
    input_size: int = 1024
    # how [0,1] slice pixels become the model's 3-channel 8-bit input;
    # only "scale255" is implemented (v*255 rounded, replicated to RGB)
    normalization: str = "scale255"
    # which of the model's candidate masks wins
    multimask: str = "highest_score"
    # hint reported at registration, bytes per cached slice embedding
    embedding_bytes: int = 256 * 256 * 16

    def __post_init__(self):
        if self.input_size <= 0:
            raise ValueError(f"input_size must be positive, got {self.input_size}")
        if self.normalization != "scale255":
            raise ValueError(f"unknown normalization rule {self.normalization!r}")
        if self.multimask != "highest_score":
            raise ValueError(f"unknown multimask rule {self.multimask!r}")

    def check_weights(self):
        if not os.path.isfile(self.weights):
            raise FileNotFoundError(f"weights not found: {self.weights}")


# registry arch keys double as the loadable architecture name; mobile_vit_t
# comes from the MobileSAM registry, the rest from segment-anything
PRESETS = {
    "mobile_vit_t": ModelPreset("mobile_vit_t", "mobile_sam.pt",
                                embedding_bytes=64 * 64 * 256 * 4),
    "vanilla_vit_b": ModelPreset("vanilla_vit_b", "sam_vit_b_01ec64.pth",
                                 embedding_bytes=64 * 64 * 256 * 4),
    "vanilla_vit_l": ModelPreset("vanilla_vit_l", "sam_vit_l_0b3195.pth",
                                 embedding_bytes=64 * 64 * 256 * 4),
    "vanilla_vit_h": ModelPreset("vanilla_vit_h", "sam_vit_h_4b8939.pth",
                                 embedding_bytes=64 * 64 * 256 * 4),
}

ARCH_FOR = {
    "mobile_vit_t": "vit_t",
    "vanilla_vit_b": "vit_b",
    "vanilla_vit_l": "vit_l",
    "vanilla_vit_h": "vit_h",
}


def resolve_preset(model_id: str, weights: str = None) -> ModelPreset:
    """Look up a preset, optionally overriding the checkpoint path."""
    try:
        preset = PRESETS[model_id]
    except KeyError:
        raise KeyError(
            f"unknown model {model_id!r}; known: {', '.join(sorted(PRESETS))}"
        ) from None
    if weights is not None:
        preset = replace(preset, weights=weights)
    return preset
