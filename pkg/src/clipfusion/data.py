"""Dataset discovery, ground-truth loading, seeded sampling, preprocessing.

Both supported layouts share the same directory shape:

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect>/*.png
    <root>/<category>/ground_truth/<defect>/<stem>_mask.png

(the organized layout names masks ``<stem>.png``; both spellings are
accepted). The train split holds only normal images; every defective test
image must have a mask.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .errors import IngestionError, InvalidArgumentError

LAYOUTS = ("mvtec", "visa_organized")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

CLIP_RESOLUTION = 240
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
DIFFUSION_RESOLUTION = 512


@dataclass(frozen=True)
class TestSample:
    image_path: Path
    label: int  # 0 normal, 1 abnormal
    mask_path: Optional[Path]
    defect_type: str


@dataclass
class CategoryIndex:
    name: str
    train_normal: List[Path]
    test: List[TestSample]


@dataclass
class DatasetIndex:
    root: Path
    layout: str
    categories: Dict[str, CategoryIndex] = field(default_factory=dict)

    def category(self, name: str) -> CategoryIndex:
        if name not in self.categories:
            raise IngestionError(f"category {name!r} not found under {self.root}")
        return self.categories[name]


def _list_images(directory: Path) -> List[Path]:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def _find_mask(gt_dir: Path, stem: str) -> Optional[Path]:
    for candidate in (gt_dir / f"{stem}_mask.png", gt_dir / f"{stem}.png"):
        if candidate.exists():
            return candidate
    return None


def discover(root: Path, layout: str = "mvtec") -> DatasetIndex:
    """Index a dataset root following the directory conventions above."""
    if layout not in LAYOUTS:
        raise InvalidArgumentError(f"layout must be one of {LAYOUTS}, got {layout!r}")
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root does not exist: {root}")
    index = DatasetIndex(root=root, layout=layout)
    category_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not category_dirs:
        raise IngestionError(f"no category directories under {root}")
    for cat_dir in category_dirs:
        train_dir = cat_dir / "train" / "good"
        test_dir = cat_dir / "test"
        if not train_dir.is_dir():
            raise IngestionError(f"missing train/good split: {train_dir}")
        if not test_dir.is_dir():
            raise IngestionError(f"missing test split: {test_dir}")
        train_normal = _list_images(train_dir)
        if not train_normal:
            raise IngestionError(f"train/good is empty: {train_dir}")
        samples: List[TestSample] = []
        for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            defect = defect_dir.name
            for image_path in _list_images(defect_dir):
                if defect == "good":
                    samples.append(TestSample(image_path, 0, None, defect))
                    continue
                mask_path = _find_mask(cat_dir / "ground_truth" / defect, image_path.stem)
                if mask_path is None:
                    raise IngestionError(
                        f"abnormal test image lacks a mask: {image_path}"
                    )
                samples.append(TestSample(image_path, 1, mask_path, defect))
        if not samples:
            raise IngestionError(f"no test images under {test_dir}")
        index.categories[cat_dir.name] = CategoryIndex(
            name=cat_dir.name, train_normal=train_normal, test=samples
        )
    return index


def sample_k_shot(index: DatasetIndex, category: str, k: int, seed: int) -> List[Path]:
    """Deterministic uniform sample of k normal training images.

    Candidates are ranked by SHA-256 of "seed|category|filename" and the
    first k taken: uniform over subsets, reproducible across platforms and
    languages, and nested in k (the 1-shot pick is the first of the 4-shot
    picks for the same seed). No host PRNG is involved.
    """
    if k < 0:
        raise InvalidArgumentError(f"k must be non-negative, got {k}")
    candidates = index.category(category).train_normal
    if k > len(candidates):
        raise InvalidArgumentError(
            f"k={k} exceeds the {len(candidates)} normal training images of {category!r}"
        )

    def rank(path: Path) -> str:
        return hashlib.sha256(f"{seed}|{category}|{path.name}".encode("utf-8")).hexdigest()

    return sorted(candidates, key=lambda p: (rank(p), p.name))[:k]


# ---------------------------------------------------------------------------
# Image IO and per-backend preprocessing
# ---------------------------------------------------------------------------


def load_image(path: Path) -> np.ndarray:
    """Decode an image file to (H, W, 3) uint8 RGB."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (OSError, SyntaxError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc


def load_mask(path: Path) -> np.ndarray:
    """Decode a ground-truth mask, binarized at > 0."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L")) > 0
    except (OSError, SyntaxError) as exc:
        raise IngestionError(f"cannot decode mask {path}: {exc}") from exc


def _to_unit_float(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgumentError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    image = image.astype(np.float64)
    if image.min() < 0.0 or image.max() > 1.0:
        raise InvalidArgumentError("float images must be in [0, 1]")
    return image


def _resize_channels(image: np.ndarray, size: int, resample) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image.copy()
    out = np.empty((size, size, 3), dtype=np.float64)
    for c in range(3):
        channel = Image.fromarray(image[:, :, c].astype(np.float32), mode="F")
        out[:, :, c] = np.asarray(channel.resize((size, size), resample=resample))
    return out


def preprocess_clip(image: np.ndarray) -> np.ndarray:
    """Bicubic resize to 240 and channel standardization; returns (3, 240, 240)."""
    unit = _to_unit_float(image)
    resized = _resize_channels(unit, CLIP_RESOLUTION, Image.BICUBIC)
    mean = np.asarray(CLIP_MEAN)
    std = np.asarray(CLIP_STD)
    return np.transpose((resized - mean) / std, (2, 0, 1))


def preprocess_diffusion(image: np.ndarray) -> np.ndarray:
    """Bilinear resize to 512 mapped into [-1, 1]; returns (3, 512, 512)."""
    unit = _to_unit_float(image)
    resized = _resize_channels(unit, DIFFUSION_RESOLUTION, Image.BILINEAR)
    return np.transpose(resized * 2.0 - 1.0, (2, 0, 1))
