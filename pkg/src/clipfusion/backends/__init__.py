"""Pluggable feature-extraction backends.

``model_id == "mock"`` selects the deterministic CPU backends; any other id
names a publicly distributed checkpoint and needs the ``real`` extra.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .base import (
    DEFAULT_CLIP_BLOCKS,
    DEFAULT_CROSS_ATTENTION_TIMESTEP,
    DEFAULT_TIMESTEP_BLOCK_PAIRS,
    CrossAttentionRequest,
    DiffusionBackend,
    VisionLanguageBackend,
    hash_rng,
)
from .mock import MOCK_MODEL_ID, MockDiffusionBackend, MockVisionLanguageBackend

__all__ = [
    "BackendBundle",
    "CrossAttentionRequest",
    "DiffusionBackend",
    "VisionLanguageBackend",
    "MockVisionLanguageBackend",
    "MockDiffusionBackend",
    "MOCK_MODEL_ID",
    "DEFAULT_CLIP_BLOCKS",
    "DEFAULT_TIMESTEP_BLOCK_PAIRS",
    "DEFAULT_CROSS_ATTENTION_TIMESTEP",
    "create_backends",
    "hash_rng",
]


@dataclass
class BackendBundle:
    """The backend pair a detection run draws from; either side may be absent
    when running a single-model scope."""

    vl: Optional[VisionLanguageBackend] = None
    diffusion: Optional[DiffusionBackend] = None


def create_vision_language_backend(model_id: str, device: str = "cpu") -> VisionLanguageBackend:
    if model_id == MOCK_MODEL_ID:
        return MockVisionLanguageBackend(device=device)
    from .clip_encoder import TransformersClipBackend

    return TransformersClipBackend(model_id=model_id, device=device)


def create_diffusion_backend(model_id: str, device: str = "cpu") -> DiffusionBackend:
    if model_id == MOCK_MODEL_ID:
        return MockDiffusionBackend(device=device)
    from .sd_inpaint import InpaintUnetBackend

    return InpaintUnetBackend(model_id=model_id, device=device)


def create_backends(
    clip_model_id: Optional[str],
    diffusion_model_id: Optional[str],
    device: str = "cpu",
) -> BackendBundle:
    """Instantiate the requested backends; pass None to skip a side."""
    vl = create_vision_language_backend(clip_model_id, device) if clip_model_id else None
    diff = create_diffusion_backend(diffusion_model_id, device) if diffusion_model_id else None
    return BackendBundle(vl=vl, diffusion=diff)
