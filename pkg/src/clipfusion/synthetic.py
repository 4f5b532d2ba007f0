"""Procedural desk-scale dataset generator.

Emits the same directory layout the dataset loader expects: procedurally
textured normal images plus defect-injected abnormal images with exact
masks. Every value is derived from SHA-seeded generators, so a fixed seed
reproduces the dataset byte for byte.

Defects are squares, elliptical blobs, or scratches with an intensity
offset; each is placed in its own image quadrant so the union of defect
pixels stays within the advertised per-image fraction bounds (counts 1-3
at 0.6%-1.2% of the image each).
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Tuple

import numpy as np
from PIL import Image

from .backends import hash_rng

TEXTURE_FAMILIES = ("stripes", "blobs", "weave")
DEFECT_KINDS = ("square", "blob", "scratch")

MIN_DEFECT_FRACTION = 0.006
MAX_DEFECT_FRACTION = 0.012


def _coords(size: int) -> Tuple[np.ndarray, np.ndarray]:
    ax = np.arange(size, dtype=np.float64)
    return np.meshgrid(ax, ax, indexing="ij")


def _texture_stripes(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _coords(size)
    theta = rng.uniform(0.0, np.pi)
    cycles = rng.uniform(4.0, 8.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    wave = np.sin(2 * np.pi * cycles * (np.cos(theta) * xx + np.sin(theta) * yy) / size + phase)
    # amplitude-modulate so full-strength stripe peaks are sparse
    coarse = rng.uniform(0.25, 1.0, size=(6, 6))
    envelope = np.asarray(
        Image.fromarray(coarse.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    )
    base = rng.uniform(0.40, 0.60, size=3)
    amp = rng.uniform(0.04, 0.08)
    img = base[None, None, :] + amp * (wave * envelope)[:, :, None] * rng.uniform(0.8, 1.0, size=3)
    return img + rng.normal(0.0, 0.01, size=img.shape)


def _texture_blobs(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.standard_normal((9, 9))
    field = np.asarray(
        Image.fromarray(coarse.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    )
    base = rng.uniform(0.42, 0.58, size=3)
    amp = rng.uniform(0.06, 0.11)
    img = base[None, None, :] + amp * (field / 2.0)[:, :, None] * rng.uniform(0.85, 1.0, size=3)
    return img + rng.normal(0.0, 0.01, size=img.shape)


def _texture_weave(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _coords(size)
    fx = rng.uniform(5.0, 9.0)
    fy = rng.uniform(5.0, 9.0)
    p1, p2 = rng.uniform(0.0, 2 * np.pi, size=2)
    weave = np.sin(2 * np.pi * fx * xx / size + p1) * np.sin(2 * np.pi * fy * yy / size + p2)
    base = rng.uniform(0.40, 0.60, size=3)
    amp = rng.uniform(0.04, 0.08)
    img = base[None, None, :] + amp * weave[:, :, None] * rng.uniform(0.85, 1.0, size=3)
    return img + rng.normal(0.0, 0.01, size=img.shape)


_TEXTURES = {"stripes": _texture_stripes, "blobs": _texture_blobs, "weave": _texture_weave}


def _defect_mask(rng: np.random.Generator, kind: str, size: int, area: float,
                 quadrant: int) -> np.ndarray:
    """A single defect's boolean mask, fully inside the given image quadrant."""
    yy, xx = _coords(size)
    half = size // 2
    qy, qx = divmod(quadrant, 2)
    margin = 4

    def center(extent_y: float, extent_x: float) -> Tuple[float, float]:
        lo_y = qy * half + extent_y + margin
        hi_y = (qy + 1) * half - extent_y - margin
        lo_x = qx * half + extent_x + margin
        hi_x = (qx + 1) * half - extent_x - margin
        return rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x)

    if kind == "square":
        side = np.sqrt(area)
        cy, cx = center(side / 2, side / 2)
        return (np.abs(yy - cy) <= side / 2) & (np.abs(xx - cx) <= side / 2)
    if kind == "blob":
        ratio = rng.uniform(0.5, 1.8)
        ry = np.sqrt(area * ratio / np.pi)
        rx = area / (np.pi * ry)
        cy, cx = center(ry, rx)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "scratch":
        # Guarantee the segment plus its width fits the quadrant; preserve the
        # requested area by widening when the length is capped. Quadrants too
        # small for a scratch get a blob instead.
        width_cap = 14.0
        max_len = half - 2 * margin - 2 - 2 * width_cap
        if max_len < 6.0:
            return _defect_mask(rng, "blob", size, area, quadrant)
        length = min(area / rng.uniform(3.0, 5.0), max_len)
        width = min(area / length, width_cap)
        angle = rng.uniform(0.0, np.pi)
        dy, dx = np.sin(angle) * length / 2, np.cos(angle) * length / 2
        cy, cx = center(abs(dy) + width, abs(dx) + width)
        # distance from each pixel to the segment [c - d, c + d]
        py, px = yy - cy, xx - cx
        t = np.clip((py * dy + px * dx) / (dy * dy + dx * dx), -1.0, 1.0)
        dist2 = (py - t * dy) ** 2 + (px - t * dx) ** 2
        return dist2 <= (width / 2.0) ** 2
    raise ValueError(f"unknown defect kind {kind!r}")


def _inject_defects(rng: np.random.Generator, image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    size = image.shape[0]
    count = int(rng.integers(1, 4))
    quadrants = rng.permutation(4)[:count]
    mask = np.zeros((size, size), dtype=bool)
    out = image.copy()
    for q in quadrants:
        kind = DEFECT_KINDS[int(rng.integers(0, len(DEFECT_KINDS)))]
        fraction = rng.uniform(MIN_DEFECT_FRACTION, MAX_DEFECT_FRACTION)
        m = _defect_mask(rng, kind, size, fraction * size * size, int(q))
        offset = rng.uniform(0.35, 0.55) * (1 if rng.uniform() < 0.5 else -1)
        tint = offset * rng.uniform(0.8, 1.2, size=3)
        out[m] = out[m] + tint[None, :]
        mask |= m
    return out, mask


def _save_rgb(image: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _save_mask(mask: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path)


def make_synthetic_dataset(
    out_root: Path,
    n_categories: int = 3,
    n_images: int = 40,
    seed: int = 0,
    image_size: int = 256,
    n_train: int = 8,
) -> Dict[str, dict]:
    """Write the dataset and return a per-category summary."""
    out_root = Path(out_root)
    summary: Dict[str, dict] = {}
    for ci in range(n_categories):
        family = TEXTURE_FAMILIES[ci % len(TEXTURE_FAMILIES)]
        category = family if ci < len(TEXTURE_FAMILIES) else f"{family}{ci}"
        texture = _TEXTURES[family]
        cat_dir = out_root / category

        for i in range(n_train):
            rng = hash_rng(seed, category, "train", i)
            _save_rgb(texture(rng, image_size), cat_dir / "train" / "good" / f"{i:03d}.png")

        n_good = n_images // 2
        n_bad = n_images - n_good
        for i in range(n_good):
            rng = hash_rng(seed, category, "test-good", i)
            _save_rgb(texture(rng, image_size), cat_dir / "test" / "good" / f"{i:03d}.png")
        fractions = []
        for i in range(n_bad):
            rng = hash_rng(seed, category, "test-defect", i)
            defective, mask = _inject_defects(rng, texture(rng, image_size))
            _save_rgb(defective, cat_dir / "test" / "defect" / f"{i:03d}.png")
            _save_mask(mask, cat_dir / "ground_truth" / "defect" / f"{i:03d}_mask.png")
            fractions.append(float(mask.mean()))
        summary[category] = {
            "train": n_train,
            "test_good": n_good,
            "test_defect": n_bad,
            "defect_fractions": fractions,
        }
    return summary
