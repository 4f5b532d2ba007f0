"""Component score maps, scalar scores, and their fusion.

Map components: the language-guided map from the contrastive encoder
(per-patch abnormal-vs-normal softmax), the language-guided map from the
denoiser (state-ensemble cross-attention mean), and the two vision-guided
maps (per-cell minimum half-cosine distance to the reference bank, averaged
over tags). Each component is min-max normalized per image before the
weighted fusion; the scalar scores that summarize a component map are taken
on its pre-normalization values, otherwise every non-constant map would
score 1.0 and classification would degenerate.

Fusion:
    map   = alpha * (clip_L + clip_V) + (1 - alpha) * (diff_L + diff_V)
    score = alpha * (s_clip_L + s_clip_V) + (1 - alpha) * (s_diff_L + s_diff_V)
with only the language terms in zero-shot mode.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backends import (
    DEFAULT_CLIP_BLOCKS,
    DEFAULT_CROSS_ATTENTION_TIMESTEP,
    DEFAULT_TIMESTEP_BLOCK_PAIRS,
    BackendBundle,
    CrossAttentionRequest,
    DiffusionBackend,
)
from .core import (
    DetectionResult,
    FeatureGrid,
    FusionWeights,
    ScoreMap,
    bilinear_resize,
    minmax_normalize,
    resize_map,
)
from .data import preprocess_clip, preprocess_diffusion
from .errors import ClipFusionError, InvalidArgumentError
from .memory import ReferenceBank, grid_min_distances
from .prompts import (
    DEFAULT_STATES,
    PromptSpec,
    RenderedPrompt,
    render_clip_prompts,
    render_diffusion_prompts,
)


@dataclass(frozen=True)
class ScoringConfig:
    fusion: FusionWeights = field(default_factory=FusionWeights)
    clip_blocks: Tuple[int, ...] = DEFAULT_CLIP_BLOCKS
    diff_pairs: Tuple[Tuple[int, int], ...] = DEFAULT_TIMESTEP_BLOCK_PAIRS
    states: Tuple[str, ...] = DEFAULT_STATES
    cross_attention_timestep: int = DEFAULT_CROSS_ATTENTION_TIMESTEP
    temperature: Optional[float] = None  # None: use the backend's value
    layer_selection: str = "encoder_and_decoder_no_bottleneck"
    smoothing_sigma: float = 0.0  # off by default

    def __post_init__(self) -> None:
        object.__setattr__(self, "clip_blocks", tuple(self.clip_blocks))
        object.__setattr__(self, "diff_pairs", tuple(tuple(p) for p in self.diff_pairs))
        object.__setattr__(self, "states", tuple(self.states))
        for t, b in self.diff_pairs:
            if b == 0:
                raise InvalidArgumentError("diff_pairs must exclude decoder block 0")
        if not self.states:
            raise InvalidArgumentError("state ensemble must be non-empty")
        if self.temperature is not None and self.temperature <= 0.0:
            raise InvalidArgumentError(f"temperature must be positive, got {self.temperature}")
        if not (1 <= self.cross_attention_timestep <= 999):
            raise InvalidArgumentError(
                f"cross-attention timestep must be in [1, 999], got {self.cross_attention_timestep}"
            )


@contextmanager
def _component(name: str):
    """Attach the failing component's name to propagated errors."""
    try:
        yield
    except ClipFusionError as exc:
        exc.args = (f"[{name}] {exc.args[0] if exc.args else ''}",) + tuple(exc.args[1:])
        raise


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise InvalidArgumentError("zero-norm vector in cosine similarity")
    return x / norms


def two_class_abnormal_probability(
    sim_abnormal: np.ndarray, sim_normal: np.ndarray, temperature: float
) -> np.ndarray:
    if temperature <= 0.0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    z = (sim_abnormal - sim_normal) / temperature
    return 1.0 / (1.0 + np.exp(-z))


def median_low(values: np.ndarray) -> float:
    """Lower-middle order statistic (exact, no interpolation)."""
    flat = np.sort(np.asarray(values), axis=None)
    return float(flat[(flat.size - 1) // 2])


# ---------------------------------------------------------------------------
# Language-guided components
# ---------------------------------------------------------------------------


def clip_language_map_raw(
    patch_grid: FeatureGrid,
    text_normal: np.ndarray,
    text_abnormal: np.ndarray,
    temperature: float,
    out_h: int,
    out_w: int,
) -> ScoreMap:
    """Per-patch abnormal probability, resized to (out_h, out_w), unnormalized."""
    tn = np.asarray(text_normal, dtype=np.float64)
    ta = np.asarray(text_abnormal, dtype=np.float64)
    if tn.shape != ta.shape or tn.shape != (patch_grid.dim,):
        raise InvalidArgumentError(
            f"text dims {tn.shape}/{ta.shape} do not match patch dim {patch_grid.dim}"
        )
    cells = _unit_rows(patch_grid.grid)
    sim_n = cells @ _unit_rows(tn[None, :])[0]
    sim_a = cells @ _unit_rows(ta[None, :])[0]
    probs = two_class_abnormal_probability(sim_a, sim_n, temperature)
    return ScoreMap(bilinear_resize(probs, out_h, out_w), normalized=False)


def clip_language_map(
    patch_grid: FeatureGrid,
    text_normal: np.ndarray,
    text_abnormal: np.ndarray,
    temperature: float,
    out_h: int,
    out_w: int,
) -> ScoreMap:
    raw = clip_language_map_raw(patch_grid, text_normal, text_abnormal, temperature, out_h, out_w)
    return minmax_normalize(raw)


def attention_ensemble_map_raw(
    diffusion_input: np.ndarray,
    prompts: Sequence[RenderedPrompt],
    backend: DiffusionBackend,
    timestep: int,
    layer_selection: str,
    out_h: int,
    out_w: int,
) -> ScoreMap:
    """Mean cross-attention map over the state ensemble, upsampled, unnormalized."""
    if not prompts:
        raise InvalidArgumentError("at least one state prompt is required")
    acc: Optional[np.ndarray] = None
    for prompt in prompts:
        request = CrossAttentionRequest(
            image=diffusion_input,
            prompt=prompt.text,
            state_token_span=prompt.state_span,
            timestep=timestep,
            layer_selection=layer_selection,
        )
        attn = backend.cross_attention(request).values
        acc = attn if acc is None else acc + attn
    mean = acc / len(prompts)
    return ScoreMap(bilinear_resize(mean, out_h, out_w), normalized=False)


def diff_language_map(
    diffusion_input: np.ndarray,
    prompts: Sequence[RenderedPrompt],
    backend: DiffusionBackend,
    timestep: int,
    layer_selection: str,
    out_h: int,
    out_w: int,
) -> ScoreMap:
    raw = attention_ensemble_map_raw(
        diffusion_input, prompts, backend, timestep, layer_selection, out_h, out_w
    )
    return minmax_normalize(raw)


# ---------------------------------------------------------------------------
# Vision-guided components
# ---------------------------------------------------------------------------


def vision_map_raw(
    query_grids: Sequence[FeatureGrid],
    bank: ReferenceBank,
    out_h: int,
    out_w: int,
) -> ScoreMap:
    """Per-tag minimum bank distances, upsampled and averaged over tags."""
    if not query_grids:
        raise InvalidArgumentError("at least one query feature grid is required")
    acc: Optional[np.ndarray] = None
    for grid in query_grids:
        h, w = grid.shape
        distances = grid_min_distances(bank, grid.tag, grid.grid.reshape(-1, grid.dim))
        upsampled = bilinear_resize(distances.reshape(h, w), out_h, out_w)
        acc = upsampled if acc is None else acc + upsampled
    return ScoreMap(acc / len(query_grids), normalized=False)


def vision_map(
    query_grids: Sequence[FeatureGrid],
    bank: ReferenceBank,
    out_h: int,
    out_w: int,
) -> ScoreMap:
    return minmax_normalize(vision_map_raw(query_grids, bank, out_h, out_w))


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------


def _weighted_sum(
    m_clip_l: Optional[np.ndarray],
    m_clip_v: Optional[np.ndarray],
    m_diff_l: Optional[np.ndarray],
    m_diff_v: Optional[np.ndarray],
    alpha: float,
    zero_shot: bool,
):
    if not (0.0 <= alpha <= 1.0):
        raise InvalidArgumentError(f"alpha must be in [0, 1], got {alpha}")
    if zero_shot and (m_clip_v is not None or m_diff_v is not None):
        raise InvalidArgumentError("vision components are not used in zero-shot mode")
    present = [m for m in (m_clip_l, m_clip_v, m_diff_l, m_diff_v) if m is not None]
    if not present:
        raise InvalidArgumentError("at least one component is required")
    zero = np.zeros_like(present[0]) if isinstance(present[0], np.ndarray) else 0.0
    cl = m_clip_l if m_clip_l is not None else zero
    cv = m_clip_v if m_clip_v is not None else zero
    dl = m_diff_l if m_diff_l is not None else zero
    dv = m_diff_v if m_diff_v is not None else zero
    if zero_shot:
        return alpha * cl + (1.0 - alpha) * dl
    return alpha * (cl + cv) + (1.0 - alpha) * (dl + dv)


def fuse_maps_raw(
    m_clip_l: Optional[ScoreMap],
    m_clip_v: Optional[ScoreMap],
    m_diff_l: Optional[ScoreMap],
    m_diff_v: Optional[ScoreMap],
    alpha: float,
    zero_shot: bool,
) -> ScoreMap:
    """The exact weighted sum, without the output normalization."""
    maps = [m for m in (m_clip_l, m_clip_v, m_diff_l, m_diff_v) if m is not None]
    if not maps:
        raise InvalidArgumentError("at least one component map is required")
    shape = maps[0].values.shape
    for m in maps:
        if m.values.shape != shape:
            raise InvalidArgumentError(
                f"component map shapes differ: {m.values.shape} vs {shape}"
            )
    fused = _weighted_sum(
        m_clip_l.values if m_clip_l is not None else None,
        m_clip_v.values if m_clip_v is not None else None,
        m_diff_l.values if m_diff_l is not None else None,
        m_diff_v.values if m_diff_v is not None else None,
        alpha,
        zero_shot,
    )
    return ScoreMap(fused, normalized=False)


def fuse_maps(
    m_clip_l: Optional[ScoreMap],
    m_clip_v: Optional[ScoreMap],
    m_diff_l: Optional[ScoreMap],
    m_diff_v: Optional[ScoreMap],
    alpha: float,
    zero_shot: bool,
) -> ScoreMap:
    """Weighted component sum, min-max normalized for output."""
    for name, m in (("clip_language", m_clip_l), ("clip_vision", m_clip_v),
                    ("diffusion_language", m_diff_l), ("diffusion_vision", m_diff_v)):
        if m is not None and not m.normalized:
            raise InvalidArgumentError(f"{name} map must be normalized before fusion")
    return minmax_normalize(fuse_maps_raw(m_clip_l, m_clip_v, m_diff_l, m_diff_v, alpha, zero_shot))


def fuse_scores(
    s_clip_l: Optional[float],
    s_clip_v: Optional[float],
    s_diff_l: Optional[float],
    s_diff_v: Optional[float],
    alpha: float,
    zero_shot: bool,
) -> float:
    for s in (s_clip_l, s_clip_v, s_diff_l, s_diff_v):
        if s is not None and not math.isfinite(s):
            raise InvalidArgumentError(f"component score is not finite: {s}")
    return float(_weighted_sum(s_clip_l, s_clip_v, s_diff_l, s_diff_v, alpha, zero_shot))


# ---------------------------------------------------------------------------
# Scalar scores
# ---------------------------------------------------------------------------


def clip_language_score(
    global_embedding: np.ndarray,
    text_normal: np.ndarray,
    text_abnormal: np.ndarray,
    temperature: float,
) -> float:
    g = np.asarray(global_embedding, dtype=np.float64)
    tn = np.asarray(text_normal, dtype=np.float64)
    ta = np.asarray(text_abnormal, dtype=np.float64)
    if g.shape != tn.shape or g.shape != ta.shape:
        raise InvalidArgumentError(
            f"embedding dims differ: image {g.shape}, text {tn.shape}/{ta.shape}"
        )
    gu = _unit_rows(g[None, :])[0]
    sim_n = float(gu @ _unit_rows(tn[None, :])[0])
    sim_a = float(gu @ _unit_rows(ta[None, :])[0])
    return float(two_class_abnormal_probability(np.float64(sim_a), np.float64(sim_n), temperature))


def diff_language_score(attention_map: ScoreMap) -> float:
    """1 - median/max of the attention ensemble map; 0 when nothing is positive."""
    values = attention_map.values
    peak = float(values.max())
    if peak <= 0.0:
        return 0.0
    score = 1.0 - median_low(values) / peak
    return min(1.0, max(0.0, score))


def vision_score(vision_map_pre_normalization: ScoreMap) -> float:
    """Maximum entry of a vision-guided map (take it before output normalization)."""
    if vision_map_pre_normalization.values.size == 0:
        raise InvalidArgumentError("empty map")
    return float(vision_map_pre_normalization.values.max())


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

CLIP_L = "clip_language"
CLIP_V = "clip_vision"
DIFF_L = "diffusion_language"
DIFF_V = "diffusion_vision"


@dataclass
class ImageFeatures:
    """Everything extracted from one query image, before any bank comparison.

    Extraction is bank-independent, so one extraction can be scored against
    many banks (e.g. the per-seed reference samples of a benchmark run).
    """

    height: int
    width: int
    patch_grid: Optional[FeatureGrid] = None
    global_embedding: Optional[np.ndarray] = None
    clip_block_grids: List[FeatureGrid] = field(default_factory=list)
    attention_mean: Optional[np.ndarray] = None  # latent-resolution raw ensemble mean
    decoder_grids: List[FeatureGrid] = field(default_factory=list)


def extract_image_features(
    image: np.ndarray,
    prompts: Sequence[RenderedPrompt],
    cfg: ScoringConfig,
    backends: BackendBundle,
    need_vision: bool,
) -> ImageFeatures:
    h, w = image.shape[:2]
    feats = ImageFeatures(height=h, width=w)
    if backends.vl is not None:
        clip_input = preprocess_clip(image)
        with _component(CLIP_L):
            feats.patch_grid = backends.vl.patch_embeddings(clip_input)
            feats.global_embedding = backends.vl.global_embedding(clip_input)
        if need_vision:
            with _component(CLIP_V):
                feats.clip_block_grids = backends.vl.block_features(clip_input, cfg.clip_blocks)
    if backends.diffusion is not None:
        diff_input = preprocess_diffusion(image)
        with _component(DIFF_L):
            acc = None
            for prompt in prompts:
                request = CrossAttentionRequest(
                    image=diff_input,
                    prompt=prompt.text,
                    state_token_span=prompt.state_span,
                    timestep=cfg.cross_attention_timestep,
                    layer_selection=cfg.layer_selection,
                )
                attn = backends.diffusion.cross_attention(request).values
                acc = attn if acc is None else acc + attn
            feats.attention_mean = acc / len(prompts)
        if need_vision:
            with _component(DIFF_V):
                feats.decoder_grids = backends.diffusion.decoder_features(
                    diff_input, cfg.diff_pairs
                )
    return feats


def score_image_features(
    feats: ImageFeatures,
    cfg: ScoringConfig,
    text_normal: Optional[np.ndarray],
    text_abnormal: Optional[np.ndarray],
    bank: Optional[ReferenceBank],
    image_id: str = "",
    temperature: Optional[float] = None,
) -> DetectionResult:
    h, w = feats.height, feats.width
    zero_shot = bank is None
    raw_maps: Dict[str, ScoreMap] = {}
    scores: Dict[str, float] = {}

    if feats.patch_grid is not None:
        if temperature is None:
            raise InvalidArgumentError("a temperature is required for the language map")
        with _component(CLIP_L):
            raw_maps[CLIP_L] = clip_language_map_raw(
                feats.patch_grid, text_normal, text_abnormal, temperature, h, w
            )
            scores[CLIP_L] = clip_language_score(
                feats.global_embedding, text_normal, text_abnormal, temperature
            )
    if feats.attention_mean is not None:
        with _component(DIFF_L):
            raw = ScoreMap(bilinear_resize(feats.attention_mean, h, w), normalized=False)
            raw_maps[DIFF_L] = raw
            scores[DIFF_L] = diff_language_score(raw)
    if not zero_shot and feats.clip_block_grids:
        with _component(CLIP_V):
            raw_maps[CLIP_V] = vision_map_raw(feats.clip_block_grids, bank, h, w)
            scores[CLIP_V] = vision_score(raw_maps[CLIP_V])
    if not zero_shot and feats.decoder_grids:
        with _component(DIFF_V):
            raw_maps[DIFF_V] = vision_map_raw(feats.decoder_grids, bank, h, w)
            scores[DIFF_V] = vision_score(raw_maps[DIFF_V])

    if not raw_maps:
        raise InvalidArgumentError("no components were computed; check the backend scope")

    normalized = {name: minmax_normalize(m) for name, m in raw_maps.items()}
    fused_raw = fuse_maps_raw(
        normalized.get(CLIP_L),
        normalized.get(CLIP_V),
        normalized.get(DIFF_L),
        normalized.get(DIFF_V),
        cfg.fusion.alpha_seg,
        zero_shot,
    )
    if cfg.smoothing_sigma > 0.0:
        from scipy.ndimage import gaussian_filter

        fused_raw = ScoreMap(gaussian_filter(fused_raw.values, cfg.smoothing_sigma))
    fused_map = minmax_normalize(fused_raw)
    fused_score = fuse_scores(
        scores.get(CLIP_L),
        scores.get(CLIP_V),
        scores.get(DIFF_L),
        scores.get(DIFF_V),
        cfg.fusion.alpha_cls,
        zero_shot,
    )
    result = DetectionResult(
        image_id=image_id,
        component_maps=normalized,
        fused_map=fused_map,
        component_scores=scores,
        fused_score=fused_score,
        shots=0 if zero_shot else bank.shots,
    )
    both_models = feats.patch_grid is not None and feats.attention_mean is not None
    if both_models:
        result.validate()
    return result


def detect_image(
    image: np.ndarray,
    prompt_spec: PromptSpec,
    cfg: ScoringConfig,
    backends: BackendBundle,
    bank: Optional[ReferenceBank] = None,
    image_id: str = "",
) -> DetectionResult:
    """Run the full per-image pipeline and return a complete DetectionResult."""
    queries, _ = render_diffusion_prompts(prompt_spec)
    text_normal = text_abnormal = None
    temperature = cfg.temperature
    if backends.vl is not None:
        normal_prompt, abnormal_prompt = render_clip_prompts(prompt_spec)
        with _component(CLIP_L):
            text_normal = backends.vl.text_embedding(normal_prompt)
            text_abnormal = backends.vl.text_embedding(abnormal_prompt)
        if temperature is None:
            temperature = backends.vl.temperature
    feats = extract_image_features(image, queries, cfg, backends, need_vision=bank is not None)
    return score_image_features(
        feats, cfg, text_normal, text_abnormal, bank, image_id=image_id, temperature=temperature
    )
