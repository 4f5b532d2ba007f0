"""Diffusion denoiser backend on top of ``diffusers``.

Uses a text-conditioned inpainting U-Net as a single-pass feature extractor:
the all-zero mask keeps the latent equal to the clean image's latent while
the denoiser runs at the requested timestep, so no noise is ever injected
and no iterative denoising happens. Cross-attention probabilities toward the
state token(s) are captured from every cross-attention layer (bottleneck
excluded by default), head-averaged, upsampled to the 64x64 latent grid and
mean-pooled across layers. Decoder features are tapped at the outputs of the
up-blocks. Classifier-free guidance is disabled: one conditional pass.

Requires the ``real`` extra (torch + diffusers) and downloadable weights;
construction raises BackendUnavailableError otherwise.
"""

from __future__ import annotations

import os
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..core import FeatureGrid, ScoreMap, SourceTag, bilinear_resize
from ..errors import BackendUnavailableError, InvalidArgumentError, TokenAlignmentError
from .base import CrossAttentionRequest

DEFAULT_DIFFUSION_MODEL_ID = "stabilityai/stable-diffusion-2-inpainting"
CACHE_ENV_VAR = "CLIPFUSION_MODEL_CACHE"


class InpaintUnetBackend:
    latent_side = 64

    def __init__(self, model_id: str = DEFAULT_DIFFUSION_MODEL_ID, device: str = "cpu"):
        try:
            import torch
            from diffusers import StableDiffusionInpaintPipeline
        except ImportError as exc:  # pragma: no cover - depends on extras
            raise BackendUnavailableError(
                "the diffusion backend needs the 'real' extra with diffusers installed"
            ) from exc
        cache_dir = os.environ.get(CACHE_ENV_VAR) or None
        try:
            pipe = StableDiffusionInpaintPipeline.from_pretrained(
                model_id, cache_dir=cache_dir, safety_checker=None
            )
        except Exception as exc:  # pragma: no cover - network/cache dependent
            raise BackendUnavailableError(f"could not load checkpoint {model_id!r}: {exc}") from exc
        self._torch = torch
        self._pipe = pipe.to(device)
        self._unet = pipe.unet
        self._vae = pipe.vae
        self._tokenizer = pipe.tokenizer
        self._text_encoder = pipe.text_encoder
        self.model_id = model_id
        self.device = device
        self.input_resolution = 512

    # -- encoding -----------------------------------------------------------

    def _encode_image(self, image: np.ndarray):
        torch = self._torch
        if image.shape != (3, self.input_resolution, self.input_resolution):
            raise InvalidArgumentError(
                f"expected (3, {self.input_resolution}, {self.input_resolution}), got {image.shape}"
            )
        px = torch.from_numpy(np.ascontiguousarray(image)).float().unsqueeze(0).to(self.device)
        with torch.no_grad():
            latents = self._vae.encode(px).latent_dist.mode() * self._vae.config.scaling_factor
        return latents

    def _encode_prompt(self, prompt: str):
        torch = self._torch
        tok = self._tokenizer(
            prompt, padding="max_length", truncation=True,
            max_length=self._tokenizer.model_max_length, return_tensors="pt",
        )
        with torch.no_grad():
            emb = self._text_encoder(tok.input_ids.to(self.device))[0]
        return tok, emb

    def _state_token_indices(self, prompt: str, span: Tuple[int, int]) -> List[int]:
        """Map a character span onto token positions.

        Prefers a fast-tokenizer offsets map; slow tokenizers fall back to
        locating the state word's token ids as a subsequence of the prompt ids.
        """
        a, b = span
        try:
            enc = self._tokenizer(
                prompt, padding="max_length", truncation=True,
                max_length=self._tokenizer.model_max_length,
                return_offsets_mapping=True,
            )
            idx = [
                i
                for i, (s, e) in enumerate(enc["offset_mapping"])
                if e > s and s < b and e > a
            ]
        except (NotImplementedError, TypeError, ValueError):
            prompt_ids = self._tokenizer(
                prompt, padding="max_length", truncation=True,
                max_length=self._tokenizer.model_max_length,
            ).input_ids
            state_ids = self._tokenizer(prompt[a:b], add_special_tokens=False).input_ids
            idx = []
            for start in range(len(prompt_ids) - len(state_ids) + 1):
                if prompt_ids[start : start + len(state_ids)] == state_ids:
                    idx = list(range(start, start + len(state_ids)))
                    break
        if not idx:
            raise TokenAlignmentError(
                f"state span {span} not found in tokenization of {prompt!r}"
            )
        return idx

    def _unet_input(self, latents):
        # Inpainting U-Net conditioning: [latents, mask, masked-image latents].
        # The empty mask preserves the whole image, so the masked-image latent
        # equals the clean latent and the noised latent is the clean latent.
        torch = self._torch
        mask = torch.zeros(
            (1, 1, self.latent_side, self.latent_side), device=self.device
        )
        return torch.cat([latents, mask, latents], dim=1)

    # -- taps ----------------------------------------------------------------

    def cross_attention(self, request: CrossAttentionRequest) -> ScoreMap:
        torch = self._torch
        latents = self._encode_image(np.asarray(request.image, dtype=np.float64))
        _, prompt_emb = self._encode_prompt(request.prompt)
        token_idx = self._state_token_indices(request.prompt, request.state_token_span)

        captured: List[Tuple[str, np.ndarray]] = []

        def make_processor(name: str):
            from diffusers.models.attention_processor import Attention

            class Recorder:
                def __call__(self, attn: Attention, hidden_states, encoder_hidden_states=None,
                             attention_mask=None, **kwargs):
                    residual = hidden_states
                    is_cross = encoder_hidden_states is not None
                    context = encoder_hidden_states if is_cross else hidden_states
                    q = attn.head_to_batch_dim(attn.to_q(hidden_states))
                    k = attn.head_to_batch_dim(attn.to_k(context))
                    v = attn.head_to_batch_dim(attn.to_v(context))
                    probs = attn.get_attention_scores(q, k, attention_mask)
                    if is_cross:
                        # (heads, pixels, tokens) -> head-averaged state-token mass
                        mass = probs[..., token_idx].mean(dim=-1).mean(dim=0)
                        captured.append((name, mass.detach().cpu().double().numpy()))
                    out = attn.batch_to_head_dim(probs @ v)
                    out = attn.to_out[0](out)
                    out = attn.to_out[1](out)
                    if attn.residual_connection:
                        out = out + residual
                    return out

            return Recorder()

        processors = {}
        for name in self._unet.attn_processors:
            processors[name] = make_processor(name)
        previous = self._unet.attn_processors
        self._unet.set_attn_processor(processors)
        try:
            t = torch.tensor([request.timestep], device=self.device)
            with torch.no_grad():
                self._unet(self._unet_input(latents), t, encoder_hidden_states=prompt_emb)
        finally:
            self._unet.set_attn_processor(previous)

        maps = []
        for name, mass in captured:
            if not self._layer_selected(name, request.layer_selection):
                continue
            side = int(round(len(mass) ** 0.5))
            if side * side != len(mass):
                continue  # non-square attention resolutions are not tapped
            maps.append(bilinear_resize(mass.reshape(side, side),
                                        self.latent_side, self.latent_side))
        if not maps:
            raise BackendUnavailableError("no cross-attention layers captured")
        return ScoreMap(np.mean(maps, axis=0), normalized=False)

    @staticmethod
    def _layer_selected(name: str, selection: str) -> bool:
        if selection == "all":
            return True
        if selection == "decoder_only":
            return name.startswith("up_blocks")
        # encoder and decoder, bottleneck (mid_block) excluded
        return name.startswith(("down_blocks", "up_blocks"))

    def decoder_features(
        self, image: np.ndarray, pairs: Sequence[Tuple[int, int]]
    ) -> List[FeatureGrid]:
        torch = self._torch
        for t, b in pairs:
            if b == 0:
                raise InvalidArgumentError("decoder block 0 is excluded from feature taps")
            if not (1 <= b < len(self._unet.up_blocks)):
                raise InvalidArgumentError(f"decoder block {b} out of range")
            if not (1 <= t <= 999):
                raise InvalidArgumentError(f"timestep must be in [1, 999], got {t}")
        latents = self._encode_image(np.asarray(image, dtype=np.float64))
        _, prompt_emb = self._encode_prompt("")

        by_timestep: Dict[int, List[int]] = {}
        for t, b in pairs:
            by_timestep.setdefault(t, []).append(b)

        results: Dict[Tuple[int, int], np.ndarray] = {}
        for t, blocks in sorted(by_timestep.items()):
            grabbed: Dict[int, np.ndarray] = {}
            hooks = []

            def make_hook(block_index: int):
                def hook(_module, _inputs, output):
                    out = output[0] if isinstance(output, tuple) else output
                    grabbed[block_index] = out.detach().cpu().double().numpy()
                return hook

            for b in blocks:
                hooks.append(self._unet.up_blocks[b].register_forward_hook(make_hook(b)))
            try:
                tt = torch.tensor([t], device=self.device)
                with torch.no_grad():
                    self._unet(self._unet_input(latents), tt, encoder_hidden_states=prompt_emb)
            finally:
                for h in hooks:
                    h.remove()
            for b in blocks:
                feat = grabbed[b][0]  # (C, H, W)
                results[(t, b)] = np.transpose(feat, (1, 2, 0))

        return [
            FeatureGrid(results[(t, b)], SourceTag("diffusion", b, timestep=t))
            for t, b in pairs
        ]
