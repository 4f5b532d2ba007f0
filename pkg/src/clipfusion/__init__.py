"""Training-free anomaly classification and segmentation.

Fuses language-guided and vision-guided anomaly score maps from a
contrastive vision-language encoder and a text-conditioned diffusion
denoiser, with few-shot reference memory banks and the standard benchmark
metrics (image/pixel AUROC, AUPR, AUPRO).
"""

__version__ = "0.1.0"

from .core import (
    DetectionResult,
    FeatureGrid,
    FusionWeights,
    ScoreMap,
    SourceTag,
    half_cosine_distance,
    load_score_map,
    minmax_normalize,
    resize_map,
    save_heatmap_png,
    save_score_map,
)
from .memory import ReferenceBank, bank_min_distance, build_bank, load_bank, save_bank
from .prompts import PromptSpec, default_states, render_clip_prompts, render_diffusion_prompts
from .scoring import ScoringConfig, detect_image

__all__ = [
    "__version__",
    "DetectionResult",
    "FeatureGrid",
    "FusionWeights",
    "PromptSpec",
    "ReferenceBank",
    "ScoreMap",
    "ScoringConfig",
    "SourceTag",
    "bank_min_distance",
    "build_bank",
    "default_states",
    "detect_image",
    "half_cosine_distance",
    "load_bank",
    "load_score_map",
    "minmax_normalize",
    "render_clip_prompts",
    "render_diffusion_prompts",
    "resize_map",
    "save_bank",
    "save_heatmap_png",
    "save_score_map",
]
