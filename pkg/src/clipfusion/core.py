"""Domain types and the small numeric primitives every other module shares.

Score maps are handled as float64 H x W grids; serialization to disk uses
32-bit little-endian rasters with a JSON sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Literal, Optional

import numpy as np

from .errors import InvalidArgumentError

ModelKind = Literal["clip", "diffusion"]


@dataclass(frozen=True)
class SourceTag:
    """Identifies where a feature grid was extracted (model, block, timestep)."""

    model: ModelKind
    block: int
    timestep: Optional[int] = None

    def __post_init__(self) -> None:
        if self.model not in ("clip", "diffusion"):
            raise InvalidArgumentError(f"unknown model kind: {self.model!r}")
        if self.model == "diffusion":
            if self.block not in (1, 2, 3):
                raise InvalidArgumentError(
                    f"diffusion decoder block must be in {{1,2,3}}, got {self.block}"
                )
            if self.timestep is None or not (1 <= self.timestep <= 999):
                raise InvalidArgumentError(
                    f"diffusion timestep must be in [1, 999], got {self.timestep}"
                )
        else:
            if self.timestep is not None:
                raise InvalidArgumentError("clip tags carry no timestep")
            if self.block < 0:
                raise InvalidArgumentError(f"negative block index: {self.block}")

    def key(self) -> str:
        """Stable string form used in bank files and JSON output."""
        if self.model == "clip":
            return f"clip:b{self.block}"
        return f"diffusion:t{self.timestep}:b{self.block}"

    @staticmethod
    def from_key(key: str) -> "SourceTag":
        parts = key.split(":")
        if parts[0] == "clip" and len(parts) == 2:
            return SourceTag("clip", int(parts[1][1:]))
        if parts[0] == "diffusion" and len(parts) == 3:
            return SourceTag("diffusion", int(parts[2][1:]), timestep=int(parts[1][1:]))
        raise InvalidArgumentError(f"malformed tag key: {key!r}")


@dataclass
class ScoreMap:
    """An H x W grid of per-pixel anomaly evidence.

    ``normalized`` records whether the values have been min-max scaled into
    [0, 1]; fusion only accepts normalized maps.
    """

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise InvalidArgumentError(f"score map must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("score map contains non-finite entries")
        if self.normalized and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise InvalidArgumentError("normalized map has entries outside [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class FeatureGrid:
    """A spatial grid of D-dimensional feature vectors plus its source tag."""

    grid: np.ndarray  # (H_f, W_f, D)
    tag: SourceTag

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3:
            raise InvalidArgumentError(f"feature grid must be (H, W, D), got {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise InvalidArgumentError("feature grid contains non-finite entries")
        norms = np.linalg.norm(self.grid, axis=-1)
        if not np.all(norms > 0.0):
            raise InvalidArgumentError("feature grid contains zero-norm cell vectors")

    @property
    def dim(self) -> int:
        return self.grid.shape[2]

    @property
    def shape(self) -> tuple:
        return self.grid.shape[:2]


@dataclass(frozen=True)
class FusionWeights:
    """Weight alpha between the two model families, per task."""

    alpha_seg: float = 0.25
    alpha_cls: float = 0.75

    def __post_init__(self) -> None:
        for name, a in (("alpha_seg", self.alpha_seg), ("alpha_cls", self.alpha_cls)):
            if not (0.0 <= a <= 1.0):
                raise InvalidArgumentError(f"{name} must be in [0, 1], got {a}")


@dataclass
class DetectionResult:
    """All component maps/scores plus the fused map and score for one image."""

    image_id: str
    component_maps: Dict[str, ScoreMap]
    fused_map: ScoreMap
    component_scores: Dict[str, float]
    fused_score: float
    shots: int = 0

    ZERO_SHOT_COMPONENTS = ("clip_language", "diffusion_language")
    FEW_SHOT_COMPONENTS = (
        "clip_language",
        "clip_vision",
        "diffusion_language",
        "diffusion_vision",
    )

    def validate(self) -> None:
        expected = self.FEW_SHOT_COMPONENTS if self.shots > 0 else self.ZERO_SHOT_COMPONENTS
        if set(self.component_maps) != set(expected):
            raise InvalidArgumentError(
                f"component maps {sorted(self.component_maps)} != expected {sorted(expected)}"
            )
        if set(self.component_scores) != set(expected):
            raise InvalidArgumentError(
                f"component scores {sorted(self.component_scores)} != expected {sorted(expected)}"
            )
        if not np.isfinite(self.fused_score):
            raise InvalidArgumentError("fused score is not finite")
        if not self.fused_map.normalized:
            raise InvalidArgumentError("fused map must be normalized")


def minmax_normalize(score_map: ScoreMap) -> ScoreMap:
    """Min-max scale a map into [0, 1]; a constant map becomes all zeros.

    Idempotent and argmax-preserving.
    """
    v = score_map.values
    lo = v.min()
    hi = v.max()
    if hi == lo:
        out = np.zeros_like(v)
    else:
        out = (v - lo) / (hi - lo)
    return ScoreMap(out, normalized=True)


def resize_map(score_map: ScoreMap, target_h: int, target_w: int) -> ScoreMap:
    """Bilinearly resize a map (half-pixel centers, corner alignment disabled)."""
    if target_h < 1 or target_w < 1:
        raise InvalidArgumentError(f"target size must be positive, got {target_h}x{target_w}")
    out = bilinear_resize(score_map.values, target_h, target_w)
    normalized = score_map.normalized  # bilinear output stays inside the input range
    return ScoreMap(out, normalized=normalized)


@lru_cache(maxsize=64)
def _bilinear_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation matrix, half-pixel centers, edges clamped."""
    ys = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0.0, src - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    y1 = np.minimum(y0 + 1, src - 1)
    wy = ys - y0
    weights = np.zeros((dst, src), dtype=np.float64)
    rows = np.arange(dst)
    np.add.at(weights, (rows, y0), 1.0 - wy)
    np.add.at(weights, (rows, y1), wy)
    return weights


def bilinear_resize(values: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resampling of a 2-D array with align_corners=False semantics."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    if (h, w) == (target_h, target_w):
        return values.copy()
    return _bilinear_weights(h, target_h) @ values @ _bilinear_weights(w, target_w).T


def half_cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """(1 - cos(u, v)) / 2, in [0, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise InvalidArgumentError(f"vector shapes differ: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise InvalidArgumentError("cosine distance undefined for zero vectors")
    cos = float(np.dot(u, v) / (nu * nv))
    cos = min(1.0, max(-1.0, cos))
    return (1.0 - cos) / 2.0


# ---------------------------------------------------------------------------
# Serialization: float32 little-endian raster + JSON sidecar, optional PNG.
# ---------------------------------------------------------------------------

RASTER_SUFFIX = ".f32"
SIDECAR_SUFFIX = ".json"


def save_score_map(score_map: ScoreMap, stem: Path) -> None:
    """Write ``<stem>.f32`` (row-major little-endian float32) and ``<stem>.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    raster = score_map.values.astype("<f4")
    stem.with_suffix(RASTER_SUFFIX).write_bytes(raster.tobytes(order="C"))
    sidecar = {
        "height": score_map.height,
        "width": score_map.width,
        "normalized": score_map.normalized,
    }
    stem.with_suffix(SIDECAR_SUFFIX).write_text(json.dumps(sidecar, sort_keys=True))


def load_score_map(stem: Path) -> ScoreMap:
    stem = Path(stem)
    sidecar = json.loads(stem.with_suffix(SIDECAR_SUFFIX).read_text())
    raw = stem.with_suffix(RASTER_SUFFIX).read_bytes()
    values = np.frombuffer(raw, dtype="<f4").reshape(sidecar["height"], sidecar["width"])
    return ScoreMap(values.astype(np.float64), normalized=bool(sidecar["normalized"]))


def save_heatmap_png(score_map: ScoreMap, path: Path) -> None:
    """8-bit grayscale heatmap for visual inspection."""
    from PIL import Image

    v = score_map.values
    if not score_map.normalized:
        v = minmax_normalize(score_map).values
    img = Image.fromarray(np.round(v * 255.0).astype(np.uint8), mode="L")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
