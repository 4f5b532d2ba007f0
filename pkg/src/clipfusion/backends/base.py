"""Backend interfaces and shared helpers.

A vision-language backend exposes the contrastive encoder taps (global token,
patch embeddings, value-value block features, text embeddings); a diffusion
backend exposes the denoiser taps (cross-attention maps and decoder feature
maps from a single empty-mask forward pass). Handles serialize access to
their device state: treat each instance as single-consumer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np

from ..core import FeatureGrid, ScoreMap
from ..errors import InvalidArgumentError, TokenAlignmentError

LAYER_SELECTIONS = ("encoder_and_decoder_no_bottleneck", "decoder_only", "all")

#: (timestep, decoder block) pairs used for vision-guided diffusion features.
#: Coarse blocks pair with high timesteps, fine blocks with low ones.
DEFAULT_TIMESTEP_BLOCK_PAIRS: Tuple[Tuple[int, int], ...] = ((201, 3), (401, 2), (801, 1))

#: Encoder blocks tapped for value-value features (middle and late of 12).
DEFAULT_CLIP_BLOCKS: Tuple[int, ...] = (6, 11)

#: Timestep for language-guided cross-attention extraction.
DEFAULT_CROSS_ATTENTION_TIMESTEP = 401


@dataclass(frozen=True)
class CrossAttentionRequest:
    """One empty-mask denoiser pass for a single query prompt."""

    image: np.ndarray  # preprocessed (3, H, W) in [-1, 1]
    prompt: str
    state_token_span: Tuple[int, int]
    timestep: int = DEFAULT_CROSS_ATTENTION_TIMESTEP
    layer_selection: str = "encoder_and_decoder_no_bottleneck"

    def __post_init__(self) -> None:
        if not (1 <= self.timestep <= 999):
            raise InvalidArgumentError(f"timestep must be in [1, 999], got {self.timestep}")
        if self.layer_selection not in LAYER_SELECTIONS:
            raise InvalidArgumentError(
                f"layer_selection must be one of {LAYER_SELECTIONS}, got {self.layer_selection!r}"
            )
        a, b = self.state_token_span
        if not (0 <= a < b <= len(self.prompt)):
            raise TokenAlignmentError(
                f"state span {self.state_token_span} outside prompt of length {len(self.prompt)}"
            )

    @property
    def state_word(self) -> str:
        a, b = self.state_token_span
        return self.prompt[a:b]


@runtime_checkable
class VisionLanguageBackend(Protocol):
    model_id: str
    device: str
    input_resolution: int
    temperature: float

    def global_embedding(self, image: np.ndarray) -> np.ndarray: ...

    def patch_embeddings(self, image: np.ndarray) -> FeatureGrid: ...

    def block_features(self, image: np.ndarray, blocks: Sequence[int]) -> List[FeatureGrid]: ...

    def text_embedding(self, prompt: str) -> np.ndarray: ...


@runtime_checkable
class DiffusionBackend(Protocol):
    model_id: str
    device: str
    input_resolution: int

    def cross_attention(self, request: CrossAttentionRequest) -> ScoreMap: ...

    def decoder_features(
        self, image: np.ndarray, pairs: Sequence[Tuple[int, int]]
    ) -> List[FeatureGrid]: ...


def hash_rng(*parts: object) -> np.random.Generator:
    """Deterministic generator keyed by the given parts (SHA-256 of their repr)."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(seed))


def check_image(image: np.ndarray, resolution: int, what: str) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (3, resolution, resolution):
        raise InvalidArgumentError(
            f"{what} expects a (3, {resolution}, {resolution}) tensor, got {image.shape}"
        )
    return image
