"""Deterministic mock backends for GPU-free testing.

Mock contract
-------------
Every mock feature vector is ``[local statistics] + [signature tail]``:

* The statistics block is ``(mean, std, |grad_x|, |grad_y|)`` of the
  luminance plane over the cell's window, each scaled by ``STAT_GAIN``.
  Decoder features append the three per-channel means. A constant
  brightness shift of the input changes *only* the mean-type channels
  (index 0 of the stats block, and the RGB mean channels of decoder
  features); std and gradient channels are shift-invariant.
* The signature tail is a position-independent pseudorandom vector seeded
  by (model_id, role, ...). It is identical for every cell of a grid, so
  cell-to-cell variation comes from the statistics alone, and it guarantees
  strictly positive norms.

Mock text embeddings are seeded by the prompt string, with a deterministic
semantic component: words from an abnormal lexicon push the std/gradient
channels up, "perfect"-like words push them down. Abnormal prompts therefore
align with high-texture images, which makes the language-guided scores
respond to injected defects.

The mock cross-attention map is the per-pixel deviation from the image
median, pooled to the 64x64 latent grid and smoothed more aggressively at
higher timesteps; attention mass lands on regions that differ from the
dominant background, e.g. the interior of an injected defect. A small
state-seeded field is added so different state words give distinct maps.
The diffusion-side mock works on a 128x128 pooled luminance plane; this is
part of the documented contract, not an approximation of anything.

Everything is a pure function of (model_id, preprocessed input, request);
repeated calls agree bit for bit.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from ..core import FeatureGrid, ScoreMap, SourceTag
from ..errors import InvalidArgumentError, TokenAlignmentError
from .base import CrossAttentionRequest, check_image, hash_rng

MOCK_MODEL_ID = "mock"

STAT_GAIN = 2.0
TEXT_SEMANTIC_GAIN = 3.5
GLOBAL_REGION_GAIN = 0.3

ABNORMAL_LEXICON = frozenset(
    {
        "damaged", "damage", "crack", "cracked", "hole", "residue", "scratch",
        "scratched", "poke", "break", "broken", "fold", "stain", "stained",
        "contamination", "bend", "bent", "cut", "defect", "defective", "flaw",
        "flawed", "anomaly", "abnormal",
    }
)
NORMAL_LEXICON = frozenset({"perfect", "good", "flawless", "pristine", "normal"})


def _luminance(image: np.ndarray) -> np.ndarray:
    return image.mean(axis=0)


def _pooled_luminance(image: np.ndarray, side: int) -> np.ndarray:
    """Channel-mean luminance block-pooled to side x side in one reduction."""
    n = image.shape[1]
    block = n // side
    return image.reshape(3, side, block, side, block).mean(axis=(0, 2, 4))


def _abs_gradients(plane: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(plane)
    gy = np.zeros_like(plane)
    gx[:, 1:] = np.abs(plane[:, 1:] - plane[:, :-1])
    gy[1:, :] = np.abs(plane[1:, :] - plane[:-1, :])
    return gx, gy


def _box_smooth(a: np.ndarray, radius: int) -> np.ndarray:
    """Separably averaged box filter with edge padding; radius 0 is the identity."""
    if radius <= 0:
        return a
    k = 2 * radius + 1

    def along_rows(x: np.ndarray) -> np.ndarray:
        pad = np.pad(x, ((radius, radius), (0, 0)), mode="edge")
        cs = np.cumsum(pad, axis=0)
        return (cs[k - 1 :] - np.vstack([np.zeros((1, x.shape[1])), cs[:-k]])) / k

    return along_rows(along_rows(a).T).T


def _pool(a: np.ndarray, side: int) -> np.ndarray:
    """Mean-pool a square array down to side x side (block size must divide)."""
    n = a.shape[0]
    block = n // side
    return a[: side * block, : side * block].reshape(side, block, side, block).mean(axis=(1, 3))


def _window_stats(plane: np.ndarray, side: int) -> np.ndarray:
    """(side, side, 4) per-window [mean, std, |gx|, |gy|] statistics."""
    n = plane.shape[0]
    block = n // side
    win = plane[: side * block, : side * block].reshape(side, block, side, block)
    mean = win.mean(axis=(1, 3))
    std = win.std(axis=(1, 3))
    gx, gy = _abs_gradients(plane)
    return np.stack([mean, std, _pool(gx, side), _pool(gy, side)], axis=-1)


def _with_signature(stats: np.ndarray, dim: int, *seed_parts: object) -> np.ndarray:
    """Append a constant signature tail, padding features up to ``dim``."""
    n_stats = stats.shape[-1]
    if n_stats >= dim:
        raise InvalidArgumentError(f"feature dim {dim} too small for {n_stats} stat channels")
    tail = hash_rng(*seed_parts).standard_normal(dim - n_stats)
    out = np.empty(stats.shape[:-1] + (dim,), dtype=np.float64)
    out[..., :n_stats] = stats * STAT_GAIN
    out[..., n_stats:] = tail
    return out


def _coarse_regions(plane: np.ndarray) -> np.ndarray:
    """Eight coarse region means (2x4 grid) of the luminance plane."""
    h, w = plane.shape
    rows = plane[: (h // 2) * 2, : (w // 4) * 4].reshape(2, h // 2, 4, w // 4)
    return rows.mean(axis=(1, 3)).ravel()


class MockVisionLanguageBackend:
    """Hash-seeded statistics features standing in for a contrastive encoder."""

    patch_size = 16
    depth = 12
    embed_dim = 64
    block_feature_dim = 16

    def __init__(self, model_id: str = MOCK_MODEL_ID, device: str = "cpu",
                 temperature: float = 0.07):
        self.model_id = model_id
        self.device = device
        self.input_resolution = 240
        self.temperature = temperature

    def global_embedding(self, image: np.ndarray) -> np.ndarray:
        image = check_image(image, self.input_resolution, "global_embedding")
        lum = _luminance(image)
        gx, gy = _abs_gradients(lum)
        emb = np.zeros(self.embed_dim, dtype=np.float64)
        emb[0] = lum.mean() * STAT_GAIN
        emb[1] = lum.std() * STAT_GAIN
        emb[2] = gx.mean() * STAT_GAIN
        emb[3] = gy.mean() * STAT_GAIN
        emb[4:12] = _coarse_regions(lum) * GLOBAL_REGION_GAIN
        emb[12:] = hash_rng(self.model_id, "global-signature").standard_normal(self.embed_dim - 12)
        return emb

    def patch_embeddings(self, image: np.ndarray) -> FeatureGrid:
        image = check_image(image, self.input_resolution, "patch_embeddings")
        side = self.input_resolution // self.patch_size
        stats = _window_stats(_luminance(image), side)
        grid = _with_signature(stats, self.embed_dim, self.model_id, "patch-signature")
        return FeatureGrid(grid, SourceTag("clip", 0))

    def block_features(self, image: np.ndarray, blocks: Sequence[int]) -> List[FeatureGrid]:
        image = check_image(image, self.input_resolution, "block_features")
        for b in blocks:
            if not (0 <= b < self.depth):
                raise InvalidArgumentError(f"block {b} outside encoder depth {self.depth}")
        lum = _luminance(image)
        side = self.input_resolution // self.patch_size
        grids = []
        for b in blocks:
            # Later blocks see a more smoothed view: coarser semantics.
            smoothed = _box_smooth(lum, radius=b // 4)
            stats = _window_stats(smoothed, side)
            grid = _with_signature(stats, self.block_feature_dim,
                                   self.model_id, "block-signature", b)
            grids.append(FeatureGrid(grid, SourceTag("clip", b)))
        return grids

    def text_embedding(self, prompt: str) -> np.ndarray:
        if not prompt:
            raise InvalidArgumentError("prompt must be non-empty")
        emb = hash_rng(self.model_id, "text", prompt).standard_normal(self.embed_dim)
        polarity = 0
        for word in prompt.lower().replace(",", " ").split():
            if word in ABNORMAL_LEXICON:
                polarity += 1
            elif word in NORMAL_LEXICON:
                polarity -= 1
        if polarity:
            emb[1:4] += TEXT_SEMANTIC_GAIN * np.sign(polarity)
        return emb


class MockDiffusionBackend:
    """Median-deviation attention maps and pooled statistics features."""

    plane_side = 128
    latent_side = 64
    decoder_sides = {1: 4, 2: 8, 3: 16}
    feature_dim = 16

    def __init__(self, model_id: str = MOCK_MODEL_ID, device: str = "cpu"):
        self.model_id = model_id
        self.device = device
        self.input_resolution = 512

    def latent(self, image: np.ndarray, timestep: int) -> np.ndarray:
        """Pooled clean-image representation fed to the denoiser.

        With the empty inpainting mask no noise is ever added, so this is
        independent of the timestep by construction.
        """
        image = check_image(image, self.input_resolution, "latent")
        if not (1 <= timestep <= 999):
            raise InvalidArgumentError(f"timestep must be in [1, 999], got {timestep}")
        channels = [_pooled_luminance(image, self.latent_side)]
        channels += [_pool(image[c], self.latent_side) for c in range(3)]
        return np.stack(channels, axis=0)

    def cross_attention(self, request: CrossAttentionRequest) -> ScoreMap:
        image = check_image(request.image, self.input_resolution, "cross_attention")
        state = request.state_word
        if not state.strip():
            raise TokenAlignmentError(f"state span selects whitespace in {request.prompt!r}")
        plane = _pooled_luminance(image, self.plane_side)
        deviation = np.abs(plane - np.median(plane))
        base = _pool(deviation, self.latent_side)

        # Pseudo-layers at increasing coarseness; the coarsest stands in for
        # the bottleneck and is only included with layer_selection="all".
        radii = {"decoder_only": (0,),
                 "encoder_and_decoder_no_bottleneck": (0, 1),
                 "all": (0, 1, 3)}[request.layer_selection]
        scale = max(1, round(request.timestep / 300))
        layers = [_box_smooth(base, r * scale) for r in radii]
        attn = np.mean(layers, axis=0)

        field = hash_rng(self.model_id, "attn-state", state).standard_normal(attn.shape)
        attn = np.maximum(attn + 0.03 * attn.mean() * field, 0.0)
        return ScoreMap(attn, normalized=False)

    def decoder_features(
        self, image: np.ndarray, pairs: Sequence[Tuple[int, int]]
    ) -> List[FeatureGrid]:
        image = check_image(image, self.input_resolution, "decoder_features")
        for t, b in pairs:
            if b == 0:
                raise InvalidArgumentError("decoder block 0 is excluded from feature taps")
            if b not in self.decoder_sides:
                raise InvalidArgumentError(f"decoder block must be in {{1,2,3}}, got {b}")
            if not (1 <= t <= 999):
                raise InvalidArgumentError(f"timestep must be in [1, 999], got {t}")
        plane = _pooled_luminance(image, self.plane_side)
        rgb16 = np.stack([_pool(image[c], 16) for c in range(3)], axis=-1)
        grids = []
        for t, b in pairs:
            # Higher timesteps blur away detail before the statistics are taken.
            smoothed = _box_smooth(plane, radius=round(t / 250))
            side = self.decoder_sides[b]
            stats = _window_stats(smoothed, side)
            rgb = _pool_channels(rgb16, side)
            feats = np.concatenate([stats, rgb], axis=-1)
            grid = _with_signature(feats, self.feature_dim,
                                   self.model_id, "decoder-signature", t, b)
            grids.append(FeatureGrid(grid, SourceTag("diffusion", b, timestep=t)))
        return grids


def _pool_channels(stack: np.ndarray, side: int) -> np.ndarray:
    """Mean-pool an (N, N, C) stack down to (side, side, C)."""
    n, _, c = stack.shape
    block = n // side
    return stack.reshape(side, block, side, block, c).mean(axis=(1, 3))
