"""Contrastive vision-language backend on top of ``transformers``.

Loads a public CLIP checkpoint (default: the ViT-B/16+ 240px LAION-400M
model) and exposes the taps the scoring pipeline needs. Patch embeddings are
projected into the joint image-text space per token; block features replace
query-key attention with value-value attention in the tapped block, which
sharpens local feature quality.

Requires the ``real`` extra (torch + transformers) and downloadable weights;
construction raises BackendUnavailableError otherwise. The weight cache
location honors the CLIPFUSION_MODEL_CACHE environment variable.
"""

from __future__ import annotations

import os
from typing import List, Sequence

import numpy as np

from ..core import FeatureGrid, SourceTag
from ..errors import BackendUnavailableError, InvalidArgumentError

DEFAULT_CLIP_MODEL_ID = "laion/CLIP-ViT-B-16-plus-240-laion400m_e32"
CACHE_ENV_VAR = "CLIPFUSION_MODEL_CACHE"


def _cache_dir() -> str | None:
    return os.environ.get(CACHE_ENV_VAR) or None


class TransformersClipBackend:
    def __init__(self, model_id: str = DEFAULT_CLIP_MODEL_ID, device: str = "cpu",
                 temperature: float | None = None):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:  # pragma: no cover - depends on extras
            raise BackendUnavailableError(
                "the vision-language backend needs the 'real' extra "
                "(pip install clipfusion[real])"
            ) from exc
        try:
            self._model = CLIPModel.from_pretrained(model_id, cache_dir=_cache_dir())
            self._processor = CLIPProcessor.from_pretrained(model_id, cache_dir=_cache_dir())
        except Exception as exc:  # pragma: no cover - network/cache dependent
            raise BackendUnavailableError(f"could not load checkpoint {model_id!r}: {exc}") from exc
        self._torch = torch
        self._model.eval().to(device)
        self.model_id = model_id
        self.device = device
        vision_cfg = self._model.config.vision_config
        self.input_resolution = int(vision_cfg.image_size)
        self.patch_size = int(vision_cfg.patch_size)
        self.depth = int(vision_cfg.num_hidden_layers)
        if temperature is None:
            # The checkpoint's learned temperature: logits are sim / tau.
            temperature = float(1.0 / self._model.logit_scale.exp().item())
        self.temperature = temperature

    # -- helpers -----------------------------------------------------------

    def _to_tensor(self, image: np.ndarray):
        torch = self._torch
        if image.shape != (3, self.input_resolution, self.input_resolution):
            raise InvalidArgumentError(
                f"expected (3, {self.input_resolution}, {self.input_resolution}), got {image.shape}"
            )
        return torch.from_numpy(np.ascontiguousarray(image)).float().unsqueeze(0).to(self.device)

    # -- taps ---------------------------------------------------------------

    def global_embedding(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            feats = self._model.get_image_features(pixel_values=self._to_tensor(image))
        return feats[0].cpu().double().numpy()

    def text_embedding(self, prompt: str) -> np.ndarray:
        if not prompt:
            raise InvalidArgumentError("prompt must be non-empty")
        torch = self._torch
        tok = self._processor.tokenizer([prompt], padding=True, return_tensors="pt").to(self.device)
        with torch.no_grad():
            feats = self._model.get_text_features(**tok)
        return feats[0].cpu().double().numpy()

    def patch_embeddings(self, image: np.ndarray) -> FeatureGrid:
        torch = self._torch
        with torch.no_grad():
            out = self._model.vision_model(pixel_values=self._to_tensor(image))
            tokens = out.last_hidden_state[:, 1:, :]  # drop the class token
            tokens = self._model.vision_model.post_layernorm(tokens)
            projected = self._model.visual_projection(tokens)
        side = self.input_resolution // self.patch_size
        grid = projected[0].reshape(side, side, -1).cpu().double().numpy()
        return FeatureGrid(grid, SourceTag("clip", 0))

    def block_features(self, image: np.ndarray, blocks: Sequence[int]) -> List[FeatureGrid]:
        for b in blocks:
            if not (0 <= b < self.depth):
                raise InvalidArgumentError(f"block {b} outside encoder depth {self.depth}")
        torch = self._torch
        with torch.no_grad():
            out = self._model.vision_model(
                pixel_values=self._to_tensor(image), output_hidden_states=True
            )
        side = self.input_resolution // self.patch_size
        grids = []
        for b in blocks:
            hidden = out.hidden_states[b]  # input to encoder layer b
            vv = self._value_value_attention(hidden, self._model.vision_model.encoder.layers[b])
            grid = vv[0, 1:, :].reshape(side, side, -1).cpu().double().numpy()
            grids.append(FeatureGrid(grid, SourceTag("clip", b)))
        return grids

    def _value_value_attention(self, hidden, layer):
        """Run one encoder block with v-v attention in place of q-k attention."""
        torch = self._torch
        attn = layer.self_attn
        x = layer.layer_norm1(hidden)
        v = attn.v_proj(x)
        bsz, seq, dim = v.shape
        heads = attn.num_heads
        head_dim = dim // heads
        vh = v.view(bsz, seq, heads, head_dim).transpose(1, 2)
        weights = torch.softmax(vh @ vh.transpose(-1, -2) * attn.scale, dim=-1)
        ctx = (weights @ vh).transpose(1, 2).reshape(bsz, seq, dim)
        return hidden + attn.out_proj(ctx)
